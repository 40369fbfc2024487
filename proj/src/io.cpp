#include "tdattn/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace tdattn {

namespace {

using nlohmann::ordered_json;

ordered_json vec3_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 vec3_from(const ordered_json& j) { return Vec3(j.at(0), j.at(1), j.at(2)); }

}  // namespace

std::string scene_to_json(const Scene& scene) {
    ordered_json doc;
    doc["gaussians"] = ordered_json::array();
    for (const auto& g : scene.cloud) {
        doc["gaussians"].push_back({
            {"position", vec3_json(g.position)},
            {"rotation_quat", {g.rotation.w(), g.rotation.x(), g.rotation.y(), g.rotation.z()}},
            {"scale", vec3_json(g.scale)},
            {"opacity", g.opacity},
            {"color", vec3_json(g.color)},
            {"attn_weight", g.attn_weight},
            {"visibility", g.visibility},
        });
    }
    doc["cameras"] = ordered_json::array();
    for (const auto& c : scene.views.cameras) {
        doc["cameras"].push_back({
            {"eye", vec3_json(c.eye)},
            {"look_at", vec3_json(c.look_at)},
            {"up", vec3_json(c.up)},
            {"focal", c.focal},
            {"resolution", {c.width, c.height}},
            {"azimuth", c.azimuth},
            {"elevation", c.elevation},
        });
    }
    doc["is_uniform_ring"] = scene.views.is_uniform_ring;
    if (scene.field.size() > 0) {
        std::vector<double> raw(scene.field.raw.data(),
                                scene.field.raw.data() + scene.field.raw.size());
        std::vector<double> vis(scene.field.visibility.data(),
                                scene.field.visibility.data() + scene.field.visibility.size());
        doc["field"] = {{"raw", raw},
                        {"visibility", vis},
                        {"views_accumulated", scene.field.views_accumulated}};
    }
    return doc.dump(1);
}

Scene scene_from_json(const std::string& text) {
    ordered_json doc;
    try {
        doc = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidParameter(std::string("scene: malformed JSON: ") + e.what());
    }
    Scene scene;
    for (const auto& j : doc.at("gaussians")) {
        Gaussian3D g;
        g.position = vec3_from(j.at("position"));
        const auto& q = j.at("rotation_quat");
        g.rotation = Quat(q.at(0), q.at(1), q.at(2), q.at(3));
        g.scale = vec3_from(j.at("scale"));
        g.opacity = j.at("opacity");
        g.color = vec3_from(j.at("color"));
        g.attn_weight = j.value("attn_weight", 0.0);
        g.visibility = j.value("visibility", 0.0);
        scene.cloud.push_back(g);
    }
    for (const auto& j : doc.value("cameras", ordered_json::array())) {
        Camera c;
        c.eye = vec3_from(j.at("eye"));
        c.look_at = vec3_from(j.at("look_at"));
        c.up = vec3_from(j.at("up"));
        c.focal = j.at("focal");
        c.width = j.at("resolution").at(0);
        c.height = j.at("resolution").at(1);
        c.azimuth = j.value("azimuth", 0.0);
        c.elevation = j.value("elevation", 0.0);
        if ((c.eye - c.look_at).norm() == 0.0) {
            throw InvalidParameter("scene: camera eye equals look_at");
        }
        if (c.width < 4 || c.height < 4) {
            throw InvalidParameter("scene: camera resolution must be >= 4x4");
        }
        scene.views.cameras.push_back(c);
    }
    scene.views.is_uniform_ring = doc.value("is_uniform_ring", false);
    if (doc.contains("field")) {
        auto raw = doc["field"].at("raw").get<std::vector<double>>();
        auto vis = doc["field"].at("visibility").get<std::vector<double>>();
        if (raw.size() != scene.cloud.size() || vis.size() != scene.cloud.size()) {
            throw InvalidParameter("scene: field length does not match cloud");
        }
        scene.field = AttentionField(raw.size());
        scene.field.raw = Eigen::Map<Eigen::VectorXd>(raw.data(), raw.size());
        scene.field.visibility = Eigen::Map<Eigen::VectorXd>(vis.data(), vis.size());
        scene.field.views_accumulated = doc["field"].at("views_accumulated");
    }
    return scene;
}

void save_scene(const Scene& scene, const std::filesystem::path& path) {
    write_text_file(scene_to_json(scene), path);
}

Scene load_scene(const std::filesystem::path& path) {
    return scene_from_json(read_text_file(path));
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidParameter("write_ppm: cannot open " + path.string());
    os << "P6\n" << img.width() << " " << img.height() << "\n255\n";
    auto to_byte = [](double v) {
        return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    };
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            unsigned char px[3] = {to_byte(img.r(y, x)), to_byte(img.g(y, x)),
                                   to_byte(img.b(y, x))};
            os.write(reinterpret_cast<char*>(px), 3);
        }
    }
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidParameter("read_ppm: cannot open " + path.string());
    std::string magic;
    int w, h, maxv;
    is >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255) throw InvalidParameter("read_ppm: unsupported format");
    is.get();
    Image img(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            unsigned char px[3];
            is.read(reinterpret_cast<char*>(px), 3);
            img.r(y, x) = px[0] / 255.0;
            img.g(y, x) = px[1] / 255.0;
            img.b(y, x) = px[2] / 255.0;
        }
    }
    return img;
}

void write_pgm16(const Grid& grid, const std::filesystem::path& path, double scale) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidParameter("write_pgm16: cannot open " + path.string());
    os << "P5\n" << grid.cols() << " " << grid.rows() << "\n65535\n";
    for (int y = 0; y < grid.rows(); ++y) {
        for (int x = 0; x < grid.cols(); ++x) {
            double v = std::clamp(grid(y, x) / scale, 0.0, 1.0);
            auto u = static_cast<std::uint16_t>(std::lround(v * 65535.0));
            unsigned char bytes[2] = {static_cast<unsigned char>(u >> 8),
                                      static_cast<unsigned char>(u & 0xff)};
            os.write(reinterpret_cast<char*>(bytes), 2);
        }
    }
}

Grid read_pgm16(const std::filesystem::path& path, double scale) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidParameter("read_pgm16: cannot open " + path.string());
    std::string magic;
    int w, h, maxv;
    is >> magic >> w >> h >> maxv;
    if (magic != "P5" || maxv != 65535) throw InvalidParameter("read_pgm16: unsupported format");
    is.get();
    Grid grid(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            unsigned char bytes[2];
            is.read(reinterpret_cast<char*>(bytes), 2);
            grid(y, x) = (bytes[0] * 256 + bytes[1]) / 65535.0 * scale;
        }
    }
    return grid;
}

void write_text_file(const std::string& text, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidParameter("write_text_file: cannot open " + path.string());
    os << text;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidParameter("read_text_file: cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::uint64_t fnv1a64(const std::string& data) {
    std::uint64_t hash = 0xcbf29ce484222325ull;
    for (unsigned char c : data) {
        hash ^= c;
        hash *= 0x100000001b3ull;
    }
    return hash;
}

std::string RunManifest::to_json() const {
    ordered_json doc = {
        {"command", command},     {"config_path", config_path},
        {"output_dir", output_dir}, {"seed", seed},
        {"created_at", created_at}, {"input_hash", input_hash},
    };
    return doc.dump(1);
}

RunManifest make_manifest(const std::string& command, const std::string& config_path,
                          const std::string& config_text, const std::string& output_dir,
                          std::uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.config_path = config_path;
    m.output_dir = output_dir;
    m.seed = seed;
    m.input_hash = fnv1a64(config_text + "\n" + std::to_string(seed));

    std::time_t t;
    if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
        t = static_cast<std::time_t>(std::strtoll(env, nullptr, 10));
    } else {
        t = std::time(nullptr);
    }
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    m.created_at = buf;
    return m;
}

}  // namespace tdattn
