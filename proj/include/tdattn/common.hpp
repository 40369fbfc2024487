#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace tdattn {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

// Row-major pixel grid: (row, col) == (y, x).
using Grid = Eigen::MatrixXd;

struct Image {
    Grid r, g, b;

    Image() = default;
    Image(int h, int w)
        : r(Grid::Zero(h, w)), g(Grid::Zero(h, w)), b(Grid::Zero(h, w)) {}

    int height() const { return static_cast<int>(r.rows()); }
    int width() const { return static_cast<int>(r.cols()); }
};

struct InvalidParameter : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericalFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RenderSettings {
    double alpha_clamp = 0.99;  // upper bound on per-splat alpha
    double cov2d_reg = 0.3;     // added to cov2d diagonal, pixel units
    double near_plane = 0.01;
    double eps_vis = 1e-6;      // floor for visibility normalization
    double sigma_cull = 3.0;    // bounding-box cull radius in sigmas
    Vec3 background = Vec3::Zero();
    int threads = 1;
};

inline constexpr double kEpsKl = 1e-8;

}  // namespace tdattn
