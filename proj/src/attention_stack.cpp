#include "tdattn/attention_stack.hpp"

#include <cmath>
#include <random>

namespace tdattn {

namespace {

// Amplitude bump, peak 1 at the center.
Grid amplitude_bump(int h, int w, const Vec2& center_norm, double sigma_norm) {
    double cx = center_norm.x() * (w - 1);
    double cy = center_norm.y() * (h - 1);
    double sigma_px = sigma_norm * std::min(w, h);
    Grid g(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double dx = x - cx, dy = y - cy;
            g(y, x) = std::exp(-0.5 * (dx * dx + dy * dy) / (sigma_px * sigma_px));
        }
    }
    return g;
}

Grid mass_bump(int h, int w, const Vec2& center_norm, double sigma_norm) {
    Grid g = amplitude_bump(h, w, center_norm, sigma_norm);
    return g / g.sum();
}

}  // namespace

std::pair<Vec2, double> BiasSpec::target_blob(const Camera& cam) const {
    Mat3 w = cam.world_to_cam();
    Vec3 t = w * (target_anchor - cam.eye);
    if (t.z() <= 0.01) return {Vec2(0.5, 0.5), target_sigma};
    Vec2 pp = cam.principal_point();
    double u = cam.focal * t.x() / t.z() + pp.x();
    double v = cam.focal * t.y() / t.z() + pp.y();
    return {Vec2(u / (cam.width - 1), v / (cam.height - 1)), target_sigma};
}

AttentionMap2D ca_map(const CAStack& stack, int layer, int head,
                      const QueryGrid& query, const TokenSet& tokens, int token,
                      bool pixel_softmax) {
    if (token < 0 || token >= static_cast<int>(tokens.tokens.size())) {
        throw InvalidParameter("ca_map: token index out of range");
    }
    const HeadParams& hp = stack.head(layer, head);
    if (query.q.cols() != stack.dim ||
        tokens.tokens[0].embedding.size() != stack.dim) {
        throw InvalidParameter("ca_map: dimension mismatch");
    }
    const int n_tok = static_cast<int>(tokens.tokens.size());
    const int n_px = query.h * query.w;

    Eigen::MatrixXd keys(n_tok, stack.dim);
    for (int t = 0; t < n_tok; ++t) {
        keys.row(t) = (hp.wk * tokens.tokens[t].embedding).transpose();
    }
    Eigen::MatrixXd logits =
        (query.q * hp.wq.transpose()) * keys.transpose() / std::sqrt(double(stack.dim));

    AttentionMap2D map;
    map.token_id = token;
    map.values = Grid(query.h, query.w);
    if (pixel_softmax) {
        Eigen::VectorXd col = logits.col(token);
        Eigen::ArrayXd e = (col.array() - col.maxCoeff()).exp();
        e /= e.sum();
        for (int p = 0; p < n_px; ++p) map.values(p / query.w, p % query.w) = e[p];
    } else {
        for (int p = 0; p < n_px; ++p) {
            Eigen::ArrayXd row = logits.row(p).array();
            Eigen::ArrayXd e = (row - row.maxCoeff()).exp();
            map.values(p / query.w, p % query.w) = e[token] / e.sum();
        }
    }
    return map;
}

AttentionMap2D synth_biased_map(const BiasSpec& bias, const Camera& cam,
                                int h, int w) {
    if (h < 8 || w < 8) throw InvalidParameter("synth_biased_map: resolution must be >= 8x8");
    auto [target_center, target_sigma] = bias.target_blob(cam);
    AttentionMap2D map;
    map.values = (1.0 - bias.epsilon) * mass_bump(h, w, target_center, target_sigma) +
                 bias.epsilon * mass_bump(h, w, bias.prior_center, bias.prior_sigma);
    return map;
}

std::vector<AttentionMap2D> forward_all(const CAStack& stack,
                                        const QueryGrid& query,
                                        const TokenSet& tokens,
                                        bool pixel_softmax) {
    std::vector<AttentionMap2D> maps;
    maps.reserve(static_cast<std::size_t>(stack.num_layers) * stack.num_heads);
    const int n_tok = static_cast<int>(tokens.tokens.size());

    for (int l = 0; l < stack.num_layers; ++l) {
        for (int h = 0; h < stack.num_heads; ++h) {
            double gain = 0.0;
            int mod_token = -1;
            bool pre = false;
            if (stack.modulation) {
                gain = stack.modulation->gain(l, h);
                mod_token = stack.modulation->token_index;
                pre = stack.modulation->pre_softmax;
            }
            if (gain <= 0.0 || pixel_softmax) {
                maps.push_back(ca_map(stack, l, h, query, tokens,
                                      tokens.subject_index, pixel_softmax));
                continue;
            }

            const HeadParams& hp = stack.head(l, h);
            Eigen::MatrixXd keys(n_tok, stack.dim);
            for (int t = 0; t < n_tok; ++t) {
                keys.row(t) = (hp.wk * tokens.tokens[t].embedding).transpose();
            }
            Eigen::MatrixXd logits = (query.q * hp.wq.transpose()) * keys.transpose() /
                                     std::sqrt(double(stack.dim));
            if (pre) logits.col(mod_token).array() += std::log(gain);

            AttentionMap2D map;
            map.token_id = tokens.subject_index;
            map.values = Grid(query.h, query.w);
            for (int p = 0; p < query.h * query.w; ++p) {
                Eigen::ArrayXd row = logits.row(p).array();
                Eigen::ArrayXd e = (row - row.maxCoeff()).exp();
                Eigen::ArrayXd probs = e / e.sum();
                if (!pre) {
                    double s = probs[mod_token];
                    double s_new = gain * s / (gain * s + (1.0 - s));
                    if (s < 1.0) {
                        double rescale = (1.0 - s_new) / (1.0 - s);
                        probs *= rescale;
                    }
                    probs[mod_token] = s_new;
                }
                map.values(p / query.w, p % query.w) = probs[tokens.subject_index];
            }
            maps.push_back(std::move(map));
        }
    }
    return maps;
}

AttentionMap2D mean_map(const std::vector<AttentionMap2D>& maps) {
    if (maps.empty()) throw InvalidParameter("mean_map: empty map list");
    AttentionMap2D out;
    out.values = Grid::Zero(maps[0].values.rows(), maps[0].values.cols());
    for (const auto& m : maps) out.values += m.values;
    out.values /= double(maps.size());
    out.token_id = maps[0].token_id;
    return out;
}

Eigen::VectorXd subclass_direction(int f, int dim) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(dim);
    e[f] = 1.0;
    return e;
}

Eigen::VectorXd prior_direction(int num_subclasses, int dim) {
    return subclass_direction(num_subclasses, dim);
}

Eigen::VectorXd background_direction(int num_subclasses, int dim) {
    return subclass_direction(num_subclasses + 1, dim);
}

CAStack make_planted_stack(int num_layers, int num_heads, int dim,
                           const std::vector<int>& planted_subclass,
                           int num_subclasses, int biased_subclass,
                           const SyntheticSourceParams& params) {
    if (dim < num_subclasses + 2) {
        throw InvalidParameter("make_planted_stack: dim must be >= num_subclasses + 2");
    }
    if (planted_subclass.size() != static_cast<std::size_t>(num_layers) * num_heads) {
        throw InvalidParameter("make_planted_stack: planting list size mismatch");
    }
    CAStack stack;
    stack.num_layers = num_layers;
    stack.num_heads = num_heads;
    stack.dim = dim;
    Eigen::VectorXd eprior = prior_direction(num_subclasses, dim);
    for (int i = 0; i < num_layers * num_heads; ++i) {
        int f = planted_subclass[i];
        HeadParams hp;
        Eigen::VectorXd ef = subclass_direction(f, dim);
        hp.wq = Eigen::MatrixXd::Identity(dim, dim) +
                params.gain_planted * (ef * ef.transpose());
        if (f == biased_subclass) {
            hp.wq += params.gain_prior * (eprior * eprior.transpose());
        }
        hp.wk = Eigen::MatrixXd::Identity(dim, dim);
        stack.heads.push_back(std::move(hp));
    }
    return stack;
}

TokenSet make_token_set(int num_subclasses, int dim, int view_subclass,
                        const SyntheticSourceParams& params) {
    Eigen::VectorXd eview = subclass_direction(view_subclass, dim);
    Eigen::VectorXd eprior = prior_direction(num_subclasses, dim);
    Eigen::VectorXd ebg = background_direction(num_subclasses, dim);

    TokenSet ts;
    ts.tokens.push_back({"squirrel", eview + params.kappa * eprior});
    ts.tokens.push_back({"back view", eview + params.rho * ebg});
    ts.tokens.push_back({"scene", ebg});
    ts.subject_index = 0;
    ts.view_index = 1;
    return ts;
}

QueryGrid make_view_query_grid(const Camera& cam, int h, int w,
                               const BiasSpec& bias, int num_subclasses,
                               int view_subclass, int dim,
                               const SyntheticSourceParams& params) {
    QueryGrid grid;
    grid.h = h;
    grid.w = w;
    grid.q = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h) * w, dim);

    auto [target_center, target_sigma] = bias.target_blob(cam);
    Grid bt = amplitude_bump(h, w, target_center, target_sigma);
    Grid bp = amplitude_bump(h, w, bias.prior_center, bias.prior_sigma);

    const int bg_dim = num_subclasses + 1;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            Eigen::Index p = static_cast<Eigen::Index>(y) * w + x;
            grid.q(p, view_subclass) = params.amp * bt(y, x);
            grid.q(p, num_subclasses) = params.amp * bias.epsilon * bp(y, x);
            grid.q(p, bg_dim) = params.bg_level;
            // Sinusoidal filler in the spare dims; orthogonal to every key.
            for (int k = num_subclasses + 2; k < dim; ++k) {
                grid.q(p, k) = params.pe_amp *
                               std::sin((k + 1) * (0.37 * x + 0.61 * y));
            }
        }
    }
    return grid;
}

QueryGrid make_probe_query_grid(std::uint64_t seed, int h, int w, int dim,
                                int num_subclasses) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> mix(0.5, 1.5);
    std::normal_distribution<double> noise(0.0, 0.05);

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
    for (int f = 0; f < num_subclasses; ++f) mean[f] = mix(rng);

    QueryGrid grid;
    grid.h = h;
    grid.w = w;
    grid.q = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h) * w, dim);
    for (Eigen::Index p = 0; p < grid.q.rows(); ++p) {
        grid.q.row(p) = mean.transpose();
        for (int k = 0; k < dim; ++k) grid.q(p, k) += noise(rng);
    }
    return grid;
}

}  // namespace tdattn
