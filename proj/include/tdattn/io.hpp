#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "tdattn/attention_field.hpp"
#include "tdattn/core_scene.hpp"

namespace tdattn {

struct Scene {
    GaussianCloud cloud;
    ViewSet views;
    AttentionField field;  // parallel array, may be empty
};

/// Lossless (1e-12) JSON round trip for Gaussians, cameras and the attention
/// field snapshot.
std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);

/// Binary P6, 8-bit, values clamped to [0,1].
void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

/// Binary P5, 16-bit big-endian; value = round(clamp(grid/scale, 0, 1)*65535).
void write_pgm16(const Grid& grid, const std::filesystem::path& path,
                 double scale = 1.0);
Grid read_pgm16(const std::filesystem::path& path, double scale = 1.0);

void write_text_file(const std::string& text, const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);

std::uint64_t fnv1a64(const std::string& data);

struct RunManifest {
    std::string command;
    std::string config_path;
    std::string output_dir;
    std::uint64_t seed = 0;
    std::string created_at;       // from SOURCE_DATE_EPOCH when set
    std::uint64_t input_hash = 0; // hash of config bytes and seed

    std::string to_json() const;
};

RunManifest make_manifest(const std::string& command, const std::string& config_path,
                          const std::string& config_text, const std::string& output_dir,
                          std::uint64_t seed);

}  // namespace tdattn
