#include "tdattn/core_scene.hpp"

#include <cmath>
#include <string>

namespace tdattn {

Mat3 Camera::world_to_cam() const {
    Vec3 forward = (look_at - eye).normalized();
    Vec3 right = forward.cross(up).normalized();
    Vec3 down = forward.cross(right).normalized();
    Mat3 w;
    w.row(0) = right;
    w.row(1) = down;
    w.row(2) = forward;
    return w;
}

Mat3 covariance_from_rs(const Quat& rotation, const Vec3& scale) {
    if (!(scale.minCoeff() > 0.0)) {
        throw InvalidParameter("covariance_from_rs: scale components must be positive");
    }
    Mat3 r = rotation.normalized().toRotationMatrix();
    Mat3 m = r * scale.asDiagonal();
    return m * m.transpose();
}

ViewSet build_view_ring(int count, double elevation, double radius,
                        double focal, int width, int height) {
    if (count < 1) throw InvalidParameter("build_view_ring: count must be >= 1");
    if (!(radius > 0.0)) throw InvalidParameter("build_view_ring: radius must be positive");

    ViewSet vs;
    vs.cameras.reserve(count);
    for (int k = 0; k < count; ++k) {
        double az = 2.0 * M_PI * k / count;
        Camera cam;
        cam.eye = Vec3(radius * std::cos(elevation) * std::cos(az),
                       radius * std::cos(elevation) * std::sin(az),
                       radius * std::sin(elevation));
        cam.look_at = Vec3::Zero();
        cam.up = Vec3(0, 0, 1);
        // Degenerate up direction when looking straight down/up the z axis.
        if (std::abs(std::cos(elevation)) < 1e-9) cam.up = Vec3(1, 0, 0);
        cam.focal = focal;
        cam.width = width;
        cam.height = height;
        cam.azimuth = az;
        cam.elevation = elevation;
        vs.cameras.push_back(cam);
    }
    vs.is_uniform_ring = true;
    return vs;
}

void clone_gaussian(GaussianCloud& cloud, std::size_t index) {
    if (index >= cloud.size()) throw InvalidParameter("clone_gaussian: index out of range");
    cloud.push_back(cloud[index]);
}

void split_gaussian(GaussianCloud& cloud, std::size_t index) {
    if (index >= cloud.size()) throw InvalidParameter("split_gaussian: index out of range");
    Gaussian3D parent = cloud[index];

    int axis = 0;
    parent.scale.maxCoeff(&axis);
    Vec3 dir = parent.rotation.toRotationMatrix().col(axis);
    Vec3 offset = 0.5 * parent.scale[axis] * dir;

    Gaussian3D child = parent;
    child.scale = 0.5 * parent.scale;

    Gaussian3D a = child;
    a.position = parent.position - offset;
    Gaussian3D b = child;
    b.position = parent.position + offset;

    cloud[index] = a;
    cloud.push_back(b);
}

std::vector<std::uint8_t> prune_gaussians(GaussianCloud& cloud,
                                          double opacity_threshold) {
    if (opacity_threshold < 0.0 || opacity_threshold > 1.0) {
        throw InvalidParameter("prune_gaussians: threshold must be in [0,1]");
    }
    std::vector<std::uint8_t> keep(cloud.size());
    GaussianCloud out;
    out.reserve(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        keep[i] = cloud[i].opacity >= opacity_threshold ? 1 : 0;
        if (keep[i]) out.push_back(cloud[i]);
    }
    cloud = std::move(out);
    return keep;
}

void validate_gaussian(const Gaussian3D& g, std::size_t index) {
    auto fail = [&](const std::string& what) {
        throw InvalidParameter("gaussian " + std::to_string(index) + ": " + what);
    };
    if (std::abs(g.rotation.norm() - 1.0) > 1e-9) fail("quaternion not normalized");
    if (!(g.scale.minCoeff() > 0.0)) fail("non-positive scale");
    if (g.opacity < 0.0 || g.opacity > 1.0) fail("opacity outside [0,1]");
    if (g.attn_weight < 0.0) fail("negative attn_weight");
    if (g.visibility < 0.0) fail("negative visibility");
    if (!g.position.allFinite() || !g.scale.allFinite() || !g.color.allFinite() ||
        !std::isfinite(g.opacity) || !std::isfinite(g.attn_weight)) {
        fail("non-finite parameter");
    }
}

}  // namespace tdattn
