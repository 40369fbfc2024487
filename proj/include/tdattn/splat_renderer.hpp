#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tdattn/core_scene.hpp"

namespace tdattn {

enum class RenderChannel { Color, Attn, Depth, All };

struct Projected {
    bool visible = false;  // false: culled (behind near plane)
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity();
    double depth = 0.0;
};

/// Per-splat data cached by the forward pass for the backward pass.
struct SplatCache {
    int index = -1;          // index into the cloud
    Vec2 mean2d;
    Mat2 inv_cov;
    double depth = 0.0;
    Vec3 t_cam;              // camera-space position
    Mat3 cov_cam;            // W * Sigma * W^T
    double x0 = 0, x1 = 0, y0 = 0, y1 = 0;  // pixel bounding box
};

struct RenderOutput {
    Image color;
    Grid depth;  // visibility-normalized mean depth, 0 where nothing splats
    Grid attn;   // visibility-normalized attention channel
    Grid mass;   // per-pixel sum of composite weights
    // Per-pixel contributor list, front-to-back: (gaussian index, weight).
    std::vector<std::vector<std::pair<int, double>>> contrib;
    std::vector<SplatCache> splats;  // depth-sorted survivors

    int height() const { return static_cast<int>(depth.rows()); }
    int width() const { return static_cast<int>(depth.cols()); }
};

struct ParamGrads {
    std::vector<Vec3> position;
    std::vector<double> opacity;
    std::vector<Vec3> color;
    std::vector<double> attn_weight;

    explicit ParamGrads(std::size_t n = 0)
        : position(n, Vec3::Zero()), opacity(n, 0.0),
          color(n, Vec3::Zero()), attn_weight(n, 0.0) {}
};

/// Pinhole projection of one Gaussian. cov2d = J W Sigma W^T J^T + reg*I.
Projected project(const Gaussian3D& g, const Camera& cam,
                  const RenderSettings& rs = {});

/// Front-to-back alpha compositing, depth ascending with index tie-break.
RenderOutput render(const GaussianCloud& cloud, const Camera& cam,
                    RenderChannel channel = RenderChannel::All,
                    const RenderSettings& rs = {});

/// Analytic gradients of sum_p [grad_color(p) . color(p) + grad_attn(p)*attn(p)]
/// w.r.t. position, opacity, color and attn_weight. Either upstream gradient
/// may be empty (treated as zero). Rotation/scale are frozen.
ParamGrads render_backward(const GaussianCloud& cloud, const Camera& cam,
                           const RenderOutput& fwd,
                           const Image* grad_color, const Grid* grad_attn,
                           const RenderSettings& rs = {});

/// Scalar loss on a render plus its image-space gradient, used by the
/// finite-difference harness and the pipeline.
struct RenderLoss {
    std::function<double(const RenderOutput&)> value;
    std::function<void(const RenderOutput&, Image& gcolor, Grid& gattn)> grad;
};

RenderLoss l2_color_loss(const Image& target);
RenderLoss l2_attn_loss(const Grid& target);

struct FiniteDiffReport {
    struct Group {
        std::string name;
        double max_rel_err = 0.0;
        int worst_gaussian = -1;
        int worst_coord = -1;
    };
    std::vector<Group> groups;
    double worst() const;
};

/// Central differences vs analytic gradients for all trainable groups.
FiniteDiffReport finite_diff_check(const GaussianCloud& cloud, const Camera& cam,
                                   const RenderLoss& loss, double h,
                                   const RenderSettings& rs = {});

}  // namespace tdattn
