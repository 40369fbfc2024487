#include "tdattn/attention_field.hpp"

#include <algorithm>
#include <cmath>

namespace tdattn {

void apply_field(const AttentionField& field, GaussianCloud& cloud,
                 bool raw_mode, double eps_vis) {
    if (field.size() != cloud.size()) {
        throw InvalidParameter("apply_field: field/cloud size mismatch");
    }
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        cloud[i].attn_weight = raw_mode ? field.raw[i] : field.weight(i, eps_vis);
        cloud[i].visibility = field.visibility[i];
    }
}

Grid bilinear_upsample(const Grid& src, int target_h, int target_w) {
    const int h = static_cast<int>(src.rows());
    const int w = static_cast<int>(src.cols());
    if (h < 2 || w < 2) throw InvalidParameter("bilinear_upsample: source must be >= 2x2");
    if (target_h < 1 || target_w < 1) {
        throw InvalidParameter("bilinear_upsample: target must be >= 1x1");
    }
    if (h == target_h && w == target_w) return src;

    Grid out(target_h, target_w);
    double sy = target_h > 1 ? double(h - 1) / (target_h - 1) : 0.0;
    double sx = target_w > 1 ? double(w - 1) / (target_w - 1) : 0.0;
    for (int y = 0; y < target_h; ++y) {
        double fy = y * sy;
        int y0 = std::min(static_cast<int>(fy), h - 2);
        double ty = fy - y0;
        for (int x = 0; x < target_w; ++x) {
            double fx = x * sx;
            int x0 = std::min(static_cast<int>(fx), w - 2);
            double tx = fx - x0;
            out(y, x) = (1 - ty) * ((1 - tx) * src(y0, x0) + tx * src(y0, x0 + 1)) +
                        ty * ((1 - tx) * src(y0 + 1, x0) + tx * src(y0 + 1, x0 + 1));
        }
    }
    return out;
}

void accumulate_view(AttentionField& field, const GaussianCloud& cloud,
                     const Camera& cam, const AttentionMap2D& map,
                     const RenderOutput& fwd) {
    if (field.size() != cloud.size()) {
        throw InvalidParameter("accumulate_view: field/cloud size mismatch");
    }
    Grid s = bilinear_upsample(map.values, cam.height, cam.width);
    const int w = cam.width;
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto& cl = fwd.contrib[static_cast<std::size_t>(y) * w + x];
            for (const auto& [idx, weight] : cl) {
                field.raw[idx] += weight * s(y, x);
                field.visibility[idx] += weight;
            }
        }
    }
    ++field.views_accumulated;
}

void accumulate_view(AttentionField& field, const GaussianCloud& cloud,
                     const Camera& cam, const AttentionMap2D& map,
                     const RenderSettings& rs) {
    RenderOutput fwd = render(cloud, cam, RenderChannel::Depth, rs);
    accumulate_view(field, cloud, cam, map, fwd);
}

AttentionMap2D render_attention(const AttentionField& field,
                                const GaussianCloud& cloud, const Camera& cam,
                                const RenderSettings& rs) {
    GaussianCloud work = cloud;
    apply_field(field, work, false, rs.eps_vis);
    RenderOutput out = render(work, cam, RenderChannel::Attn, rs);
    AttentionMap2D map;
    map.values = out.attn;
    return map;
}

KlResult attn_kl_loss(const AttentionMap2D& rendered,
                      const AttentionMap2D& observed, double eps_kl) {
    Grid obs = observed.values;
    if (obs.rows() != rendered.values.rows() || obs.cols() != rendered.values.cols()) {
        obs = bilinear_upsample(obs, static_cast<int>(rendered.values.rows()),
                                static_cast<int>(rendered.values.cols()));
    }
    if (obs.maxCoeff() <= 0.0) {
        throw InvalidParameter("attn_kl_loss: degenerate attention map");
    }

    // P = softmax over pixels of the rendered values, temperature 1.
    Grid p = (rendered.values.array() - rendered.values.maxCoeff()).exp().matrix();
    p /= p.sum();

    // Q = (observed + floor) / sum.
    Grid floored = (obs.array() + eps_kl).matrix();
    double s = floored.sum();
    Grid q = floored / s;

    KlResult result;
    Eigen::ArrayXXd score = (p.array() / q.array()).log();
    result.loss = (p.array() * score).sum();
    // d/d obs_j of -sum_k p_k log q_k with q = (obs + eps)/S:
    //   (1 - p_j / q_j) / S
    result.grad_observed = (1.0 - (p.array() / q.array())).matrix() / s;
    // d/d rendered_j through the softmax: p_j * (log(p_j/q_j) - KL).
    result.grad_rendered = (p.array() * (score - result.loss)).matrix();
    return result;
}

void sync_resize(AttentionField& field, const FieldEvent& event) {
    switch (event.kind) {
        case FieldEvent::Kind::Clone:
        case FieldEvent::Kind::Split: {
            if (event.index >= field.size()) {
                throw InvalidParameter("sync_resize: stale event index");
            }
            Eigen::VectorXd raw(field.raw.size() + 1);
            Eigen::VectorXd vis(field.visibility.size() + 1);
            raw << field.raw, field.raw[event.index];
            vis << field.visibility, field.visibility[event.index];
            field.raw = std::move(raw);
            field.visibility = std::move(vis);
            break;
        }
        case FieldEvent::Kind::Prune: {
            if (event.keep.size() != field.size()) {
                throw InvalidParameter("sync_resize: stale prune mask");
            }
            std::size_t n = 0;
            for (auto k : event.keep) n += k ? 1 : 0;
            Eigen::VectorXd raw(n), vis(n);
            std::size_t j = 0;
            for (std::size_t i = 0; i < event.keep.size(); ++i) {
                if (!event.keep[i]) continue;
                raw[j] = field.raw[i];
                vis[j] = field.visibility[i];
                ++j;
            }
            field.raw = std::move(raw);
            field.visibility = std::move(vis);
            break;
        }
    }
}

}  // namespace tdattn
