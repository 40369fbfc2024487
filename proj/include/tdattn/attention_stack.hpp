#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tdattn/attention_field.hpp"
#include "tdattn/core_scene.hpp"

namespace tdattn {

struct TokenSet {
    struct Token {
        std::string word;
        Eigen::VectorXd embedding;
    };
    std::vector<Token> tokens;
    int subject_index = 0;
    int view_index = -1;
};

/// Synthetic view-bias source: the per-view attention activation is a mixture
/// of a view-tracking target blob (the projection of a fixed world-space
/// anchor) and a view-independent prior blob at a fixed image location,
/// mixed by epsilon.
struct BiasSpec {
    double epsilon = 0.5;                 // [0,1]
    double prior_view = 0.0;              // azimuth of the over-represented view
    Vec2 prior_center = Vec2(0.7, 0.3);   // normalized image coords
    double prior_sigma = 0.08;            // normalized units
    Vec3 target_anchor = Vec3(0.5, 0.0, 0.2);
    double target_sigma = 0.08;

    // (center in normalized image coords, sigma) of the target blob.
    std::pair<Vec2, double> target_blob(const Camera& cam) const;
};

struct HeadParams {
    Eigen::MatrixXd wq, wk;  // d x d
};

/// Post-softmax gain on one token column, renormalized per pixel.
/// pre_softmax switches to a log-gain logit offset instead.
struct Modulation {
    int token_index = 0;
    Eigen::MatrixXd gain;  // L x H; <= 0 leaves the head untouched
    bool pre_softmax = false;
};

struct CAStack {
    int num_layers = 4;
    int num_heads = 4;
    int dim = 16;
    std::vector<HeadParams> heads;  // index l * num_heads + h
    std::optional<Modulation> modulation;

    const HeadParams& head(int l, int h) const {
        return heads[static_cast<std::size_t>(l) * num_heads + h];
    }
};

struct QueryGrid {
    Eigen::MatrixXd q;  // (h*w) x d, pixels row-major
    int h = 0, w = 0;
};

/// Per-pixel softmax over the token vocabulary, selected token's column
/// reshaped to h x w. pixel_softmax instead normalizes the selected token's
/// logits over pixels.
AttentionMap2D ca_map(const CAStack& stack, int layer, int head,
                      const QueryGrid& query, const TokenSet& tokens, int token,
                      bool pixel_softmax = false);

/// map = (1-eps) * G(target blob) + eps * G(prior blob), each G a
/// mass-normalized isotropic Gaussian bump.
AttentionMap2D synth_biased_map(const BiasSpec& bias, const Camera& cam,
                                int h, int w);

/// Subject-token maps for every (layer, head), modulation hook applied.
std::vector<AttentionMap2D> forward_all(const CAStack& stack,
                                        const QueryGrid& query,
                                        const TokenSet& tokens,
                                        bool pixel_softmax = false);

/// Elementwise mean of the per-head maps; the aggregate observed map the
/// pipeline accumulates.
AttentionMap2D mean_map(const std::vector<AttentionMap2D>& maps);

// ---------------------------------------------------------------------------
// Synthetic source construction. Subclass f responds to embedding direction
// e_f; the prior-view feature and a background direction take the next two
// basis slots, so dim >= num_subclasses + 2.

Eigen::VectorXd subclass_direction(int f, int dim);
Eigen::VectorXd prior_direction(int num_subclasses, int dim);
Eigen::VectorXd background_direction(int num_subclasses, int dim);

struct SyntheticSourceParams {
    double amp = 8.0;         // target bump logit amplitude
    double kappa = 0.3;       // subject-token coupling to the prior feature
    double bg_level = 2.0;    // uniform background logit
    double rho = 0.5;         // view-token coupling to the background
    double gain_planted = 6.0;  // Wq amplification of the planted direction
    double gain_prior = 4.0;  // extra prior-feature amplification on view heads
    double pe_amp = 0.1;      // positional-encoding amplitude in spare dims
};

/// Head (l,h) is planted for subclass planted_subclass[l*H+h]; heads planted
/// for biased_subclass additionally amplify the prior-view feature.
CAStack make_planted_stack(int num_layers, int num_heads, int dim,
                           const std::vector<int>& planted_subclass,
                           int num_subclasses, int biased_subclass,
                           const SyntheticSourceParams& params = {});

/// subject / view / background token vocabulary over the direction basis.
TokenSet make_token_set(int num_subclasses, int dim, int view_subclass,
                        const SyntheticSourceParams& params = {});

/// Content query grid for one pipeline view: target-blob activation along the
/// view-subclass direction, epsilon-scaled prior-blob activation along the
/// prior direction, uniform background, sinusoidal filler in spare dims.
QueryGrid make_view_query_grid(const Camera& cam, int h, int w,
                               const BiasSpec& bias, int num_subclasses,
                               int view_subclass, int dim,
                               const SyntheticSourceParams& params = {});

/// Seeded probe grid: random positive mix of all subclass directions plus
/// small pixel noise.
QueryGrid make_probe_query_grid(std::uint64_t seed, int h, int w, int dim,
                                int num_subclasses);

}  // namespace tdattn
