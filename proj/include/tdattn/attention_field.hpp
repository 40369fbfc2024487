#pragma once

#include <cstdint>
#include <vector>

#include "tdattn/splat_renderer.hpp"

namespace tdattn {

struct AttentionMap2D {
    Grid values;  // h x w, nonnegative
    int token_id = 0;
    int view_id = 0;

    int height() const { return static_cast<int>(values.rows()); }
    int width() const { return static_cast<int>(values.cols()); }
};

/// Per-Gaussian accumulators. weight(i) is the visibility-normalized average
/// of the per-view sums; raw(i) keeps the unnormalized sum for exact
/// comparisons against the direct multi-view formula.
struct AttentionField {
    Eigen::VectorXd raw;
    Eigen::VectorXd visibility;
    int views_accumulated = 0;

    AttentionField() = default;
    explicit AttentionField(std::size_t n)
        : raw(Eigen::VectorXd::Zero(n)), visibility(Eigen::VectorXd::Zero(n)) {}

    std::size_t size() const { return static_cast<std::size_t>(raw.size()); }
    double weight(std::size_t i, double eps_vis = 1e-6) const {
        return raw[i] / std::max(visibility[i], eps_vis);
    }
};

/// Writes field weights into the cloud's attn_weight / visibility slots so a
/// subsequent render produces the field's attention channel.
/// raw_mode keeps the unnormalized sums instead of the averages.
void apply_field(const AttentionField& field, GaussianCloud& cloud,
                 bool raw_mode = false, double eps_vis = 1e-6);

/// Corner-aligned bilinear resampling to the target resolution.
Grid bilinear_upsample(const Grid& src, int target_h, int target_w);

/// One view of the accumulation: raw_i += sum_p w_i(p) * I(S(p)),
/// visibility_i += sum_p w_i(p), using the forward pass contributions.
void accumulate_view(AttentionField& field, const GaussianCloud& cloud,
                     const Camera& cam, const AttentionMap2D& map,
                     const RenderOutput& fwd);

/// Convenience overload that runs the forward pass itself.
void accumulate_view(AttentionField& field, const GaussianCloud& cloud,
                     const Camera& cam, const AttentionMap2D& map,
                     const RenderSettings& rs = {});

/// Renders the field's attention channel at the camera resolution.
AttentionMap2D render_attention(const AttentionField& field,
                                const GaussianCloud& cloud, const Camera& cam,
                                const RenderSettings& rs = {});

struct KlResult {
    double loss = 0.0;
    Grid grad_observed;  // d loss / d observed raw values
    Grid grad_rendered;  // d loss / d rendered raw values (through the softmax)
};

/// KL(P || Q) with P = softmax over pixels of the rendered map and Q the
/// observed map floored at eps_kl and normalized to a pixel distribution.
KlResult attn_kl_loss(const AttentionMap2D& rendered,
                      const AttentionMap2D& observed, double eps_kl = kEpsKl);

struct FieldEvent {
    enum class Kind { Clone, Split, Prune } kind;
    std::size_t index = 0;               // clone/split
    std::vector<std::uint8_t> keep;      // prune

    static FieldEvent clone(std::size_t i) { return {Kind::Clone, i, {}}; }
    static FieldEvent split(std::size_t i) { return {Kind::Split, i, {}}; }
    static FieldEvent prune(std::vector<std::uint8_t> mask) {
        return {Kind::Prune, 0, std::move(mask)};
    }
};

/// Keeps field entries aligned with the cloud after clone/split/prune.
/// Clone/split copy the parent's accumulators to the children.
void sync_resize(AttentionField& field, const FieldEvent& event);

}  // namespace tdattn
