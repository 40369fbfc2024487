#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tdattn/common.hpp"

namespace tdattn {

/// One anisotropic splat. attn_weight / visibility are the accumulators the
/// attention field keeps synchronized with the cloud.
struct Gaussian3D {
    Vec3 position = Vec3::Zero();
    Quat rotation = Quat::Identity();  // unit quaternion
    Vec3 scale = Vec3::Ones();         // componentwise > 0
    double opacity = 1.0;              // [0,1]
    Vec3 color = Vec3::Ones();         // RGB in [0,1]
    double attn_weight = 0.0;
    double visibility = 0.0;
};

using GaussianCloud = std::vector<Gaussian3D>;

struct Camera {
    Vec3 eye = Vec3(0, 0, -4);
    Vec3 look_at = Vec3::Zero();
    Vec3 up = Vec3(0, 0, 1);
    double focal = 40.0;  // pixels
    int width = 32;
    int height = 32;
    double azimuth = 0.0;
    double elevation = 0.0;

    // Rows: right, down, forward (world -> camera rotation).
    Mat3 world_to_cam() const;
    Vec2 principal_point() const {
        return Vec2(0.5 * (width - 1), 0.5 * (height - 1));
    }
};

struct ViewSet {
    std::vector<Camera> cameras;
    bool is_uniform_ring = false;
};

/// Sigma = R * S * S^T * R^T. Throws InvalidParameter on non-positive scale.
Mat3 covariance_from_rs(const Quat& rotation, const Vec3& scale);

/// Cameras at azimuths 2*pi*k/count on a circle of given radius, all looking
/// at the origin.
ViewSet build_view_ring(int count, double elevation, double radius,
                        double focal = 40.0, int width = 32, int height = 32);

/// Duplicates the Gaussian at index (all fields, accumulators included).
void clone_gaussian(GaussianCloud& cloud, std::size_t index);

/// Replaces the parent with two children: halved scales, positions offset
/// +-0.5*scale along the largest-scale principal axis. First child overwrites
/// the parent slot, second is appended.
void split_gaussian(GaussianCloud& cloud, std::size_t index);

/// Removes Gaussians with opacity < threshold. Returns the keep mask so the
/// attention field can drop the same entries.
std::vector<std::uint8_t> prune_gaussians(GaussianCloud& cloud,
                                          double opacity_threshold);

void validate_gaussian(const Gaussian3D& g, std::size_t index);

}  // namespace tdattn
