#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tdattn/attention_field.hpp"
#include "tdattn/attention_stack.hpp"
#include "tdattn/ham.hpp"

namespace tdattn {

struct GenConfig {
    int iter0 = 20, iter1 = 200, iter2 = 400;  // stage boundaries
    double lambda1 = 10.0;
    double lr = 0.5;
    int views_per_step = 1;
    std::uint64_t seed = 1;
    bool ham_enabled = true;
    bool aag_enabled = true;
    std::string target_subclass = "direction";
    double lambda_mod = 0.2;

    // desk-scale experiment knobs
    int n_views = 8;
    int render_w = 32, render_h = 32;
    int n_gaussians = 64;
    double ring_radius = 4.0, focal = 40.0, elevation = 0.3;
    double guidance_rate = 150.0;  // field-space guidance step size
    int heldout_views = 4;
    int profile_probes = 50;
    bool raw_accumulation = false;  // exact multi-view sums instead of averages
    bool pixel_softmax = false;
    int threads = 1;

    void validate() const;
};

struct EditConfig {
    int iter = 200;
    double lambda2 = 10.0;
    int top_k = 3;
    std::string mask_source = "all-ones";  // or "fixture"
    std::string scorer = "l2-to-target";   // or "constant"
    std::uint64_t seed = 1;

    double lr = 0.5;
    bool ham_enabled = true;
    std::string target_subclass = "direction";
    double lambda_mod = 0.2;
    double guidance_rate = 150.0;  // field-space guidance step size
    int profile_probes = 50;
    bool pixel_softmax = false;
    int threads = 1;
    std::vector<Grid> fixture_masks;  // used when mask_source == "fixture"

    void validate(std::size_t n_views) const;
};

struct HistoryRow {
    int step = 0;
    int stage = 0;
    double base_loss = 0.0;
    double attn_loss = 0.0;
    double total = 0.0;
    double inconsistency = 0.0;
    bool ham_active = false;
    bool attn_active = false;
};

std::string history_csv(const std::vector<HistoryRow>& rows);

struct TrainableGroups {
    double position = 1.0;
    double opacity = 1.0;
    double color = 1.0;
};

/// Plain gradient descent with per-group multipliers; opacity clamped to
/// [0,1], scales kept positive. NaN gradients abort with the parameter path.
void sgd_step(GaussianCloud& cloud, const ParamGrads& grads, double lr,
              const TrainableGroups& groups);

/// base + lambda * attn; task picks the coefficient.
enum class Task { Generation, Editing };
double loss_total(Task task, double base_loss, double attn_loss,
                  double lambda1, double lambda2);

/// Everything the synthetic experiments share: SGT fixture, the planted
/// stack (layer 0 Object, layer 1 Attribute, layers 2-3 View), and tokens.
struct ExperimentFixture {
    SemanticGuidanceTree sgt;
    CAStack stack;
    TokenSet tokens;
    std::vector<int> planted;  // subclass per (l, h)
    int view_subclass = 0;
    int dim = 16;
};

ExperimentFixture make_experiment_fixture(int dim = 16);
ExperimentFixture make_experiment_fixture(const SemanticGuidanceTree& sgt);

/// Seeded ball of Gaussians around the origin (the "ground truth" scene) and
/// a noisy copy of it (the optimization start).
GaussianCloud make_reference_cloud(int n, std::uint64_t seed);
GaussianCloud make_initial_cloud(int n, std::uint64_t seed);

struct GenResult {
    GaussianCloud cloud;
    AttentionField field;
    ViewSet views;
    std::vector<HistoryRow> history;
    // Field snapshot at the end of each stage that ran, with its stage number.
    std::vector<std::pair<int, AttentionField>> stage_fields;
    bool diverged = false;
};

/// Staged generation loop: stage 1 base loss only (HAM active if enabled),
/// stage 2 adds the attention KL term with lambda1, stage 3 drops HAM.
GenResult run_generation(const GaussianCloud& cloud0, const GenConfig& config,
                         const BiasSpec& bias, const SemanticGuidanceTree& sgt);

/// Mean over heldout views of KL(rendered field attention || per-view map).
double inconsistency_metric(const AttentionField& field, const GaussianCloud& cloud,
                            const std::vector<Camera>& heldout_views,
                            const std::vector<AttentionMap2D>& per_view_maps,
                            const RenderSettings& rs = {});

struct Reprojection {
    Image image;
    Grid validity;  // 1 where the reprojected sample is usable
};

/// Unprojects target pixels through the rendered depth and samples the source
/// view; source_depth (when given) rejects occlusion-inconsistent pixels at
/// 5% relative depth disagreement.
Reprojection reproject(const Image& source_image, const Camera& source_cam,
                       const Grid& depth_of_target, const Camera& target_cam,
                       const Grid* source_depth = nullptr,
                       const RenderSettings& rs = {});

struct EditResult {
    GaussianCloud cloud;
    AttentionField field;
    std::vector<HistoryRow> history;
    std::vector<Image> fused_guidance;  // per view
    bool diverged = false;
};

/// Candidate edit per view, top-k filtering, masked multi-view fusion, then
/// the inner optimization on masked L2 + lambda2 * attention KL.
EditResult run_editing(const GaussianCloud& cloud, const ViewSet& views,
                       const std::vector<Image>& edit_target_images,
                       const EditConfig& config, const SemanticGuidanceTree& sgt,
                       const BiasSpec& bias = {});

}  // namespace tdattn
