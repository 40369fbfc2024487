#include "tdattn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace tdattn {

namespace {

constexpr std::uint64_t kProbeSeedStride = 0x9e3779b97f4a7c15ull;

std::vector<Camera> offset_ring(int count, double elevation, double radius,
                                double focal, int width, int height,
                                double azimuth_offset) {
    std::vector<Camera> cams;
    cams.reserve(count);
    for (int k = 0; k < count; ++k) {
        double az = 2.0 * M_PI * k / count + azimuth_offset;
        Camera cam;
        cam.eye = Vec3(radius * std::cos(elevation) * std::cos(az),
                       radius * std::cos(elevation) * std::sin(az),
                       radius * std::sin(elevation));
        cam.look_at = Vec3::Zero();
        cam.up = std::abs(std::cos(elevation)) < 1e-9 ? Vec3(1, 0, 0) : Vec3(0, 0, 1);
        cam.focal = focal;
        cam.width = width;
        cam.height = height;
        cam.azimuth = az;
        cam.elevation = elevation;
        cams.push_back(cam);
    }
    return cams;
}

CAStack profiled_stack(const ExperimentFixture& fx, const SemanticGuidanceTree& sgt,
                       const std::string& target_subclass, double lambda_mod,
                       int n_probes, std::uint64_t seed, bool pre_softmax = false) {
    CAStack stack = fx.stack;
    std::vector<QueryGrid> probes;
    probes.reserve(n_probes);
    for (int i = 0; i < n_probes; ++i) {
        probes.push_back(make_probe_query_grid(seed + kProbeSeedStride * (i + 1), 8, 8,
                                               fx.dim, sgt.num_subclasses()));
    }
    WeightMatrices wm(sgt.num_classes(), sgt.num_subclasses(), stack.num_layers,
                      stack.num_heads);
    accumulate_weights(wm, probes, stack, sgt, seed);
    modulate(stack, wm, sgt, target_subclass, lambda_mod, fx.tokens, -1, pre_softmax);
    return stack;
}

double bilinear_at(const Grid& g, double row, double col) {
    const int h = static_cast<int>(g.rows());
    const int w = static_cast<int>(g.cols());
    double r = std::clamp(row, 0.0, static_cast<double>(h - 1));
    double c = std::clamp(col, 0.0, static_cast<double>(w - 1));
    int r0 = std::min(static_cast<int>(r), h - 2);
    int c0 = std::min(static_cast<int>(c), w - 2);
    if (h == 1) r0 = 0;
    if (w == 1) c0 = 0;
    double fr = r - r0, fc = c - c0;
    double v00 = g(r0, c0);
    double v01 = g(r0, std::min(c0 + 1, w - 1));
    double v10 = g(std::min(r0 + 1, h - 1), c0);
    double v11 = g(std::min(r0 + 1, h - 1), std::min(c0 + 1, w - 1));
    return (1 - fr) * ((1 - fc) * v00 + fc * v01) + fr * ((1 - fc) * v10 + fc * v11);
}

void check_finite(double v, const std::string& what) {
    if (!std::isfinite(v)) throw NumericalFailure(what + " is not finite");
}

}  // namespace

void GenConfig::validate() const {
    if (iter0 < 0 || iter1 < iter0 || iter2 < iter1) {
        throw InvalidParameter("gen config: need 0 <= iter0 <= iter1 <= iter2");
    }
    if (lambda1 < 0.0) throw InvalidParameter("gen config: lambda1 must be >= 0");
    if (!(lr > 0.0)) throw InvalidParameter("gen config: lr must be positive");
    if (views_per_step < 1) throw InvalidParameter("gen config: views_per_step must be >= 1");
    if (!(lambda_mod > 0.0)) throw InvalidParameter("gen config: lambda_mod must be positive");
    if (n_views < 1 || heldout_views < 1) {
        throw InvalidParameter("gen config: need at least one view");
    }
    if (render_w < 8 || render_h < 8) {
        throw InvalidParameter("gen config: render resolution must be >= 8x8");
    }
    if (n_gaussians < 1) throw InvalidParameter("gen config: n_gaussians must be >= 1");
    if (profile_probes < 1) throw InvalidParameter("gen config: profile_probes must be >= 1");
    if (threads < 1) throw InvalidParameter("gen config: threads must be >= 1");
}

void EditConfig::validate(std::size_t n_views) const {
    if (iter < 0) throw InvalidParameter("edit config: iter must be >= 0");
    if (lambda2 < 0.0) throw InvalidParameter("edit config: lambda2 must be >= 0");
    if (top_k < 1 || static_cast<std::size_t>(top_k) > n_views) {
        throw InvalidParameter("edit config: need 1 <= top_k <= number of views");
    }
    if (mask_source != "fixture" && mask_source != "all-ones") {
        throw InvalidParameter("edit config: mask_source must be fixture or all-ones");
    }
    if (scorer != "l2-to-target" && scorer != "constant") {
        throw InvalidParameter("edit config: scorer must be l2-to-target or constant");
    }
    if (!(lr > 0.0)) throw InvalidParameter("edit config: lr must be positive");
    if (mask_source == "fixture" && fixture_masks.size() != n_views) {
        throw InvalidParameter("edit config: fixture needs one mask per view");
    }
    if (threads < 1) throw InvalidParameter("edit config: threads must be >= 1");
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
    std::ostringstream os;
    os << "step,base_loss,attn_loss,total,inconsistency_metric,stage\n";
    os << std::setprecision(17);
    for (const auto& r : rows) {
        os << r.step << ',' << r.base_loss << ',' << r.attn_loss << ',' << r.total
           << ',' << r.inconsistency << ',' << r.stage << '\n';
    }
    return os.str();
}

void sgd_step(GaussianCloud& cloud, const ParamGrads& grads, double lr,
              const TrainableGroups& groups) {
    if (grads.position.size() != cloud.size()) {
        throw InvalidParameter("sgd_step: gradient/cloud size mismatch");
    }
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const std::string path = "gaussians[" + std::to_string(i) + "]";
        if (!grads.position[i].allFinite()) {
            throw NumericalFailure("sgd_step: NaN gradient at " + path + ".position");
        }
        if (!std::isfinite(grads.opacity[i])) {
            throw NumericalFailure("sgd_step: NaN gradient at " + path + ".opacity");
        }
        if (!grads.color[i].allFinite()) {
            throw NumericalFailure("sgd_step: NaN gradient at " + path + ".color");
        }
        Gaussian3D& g = cloud[i];
        g.position -= lr * groups.position * grads.position[i];
        g.opacity = std::clamp(g.opacity - lr * groups.opacity * grads.opacity[i], 0.0, 1.0);
        g.color = (g.color - lr * groups.color * grads.color[i])
                      .cwiseMax(0.0).cwiseMin(1.0);
        g.scale = g.scale.cwiseMax(1e-6);
    }
}

double loss_total(Task task, double base_loss, double attn_loss,
                  double lambda1, double lambda2) {
    check_finite(base_loss, "loss_total: base loss");
    check_finite(attn_loss, "loss_total: attn loss");
    double lambda = task == Task::Generation ? lambda1 : lambda2;
    return base_loss + lambda * attn_loss;
}

ExperimentFixture make_experiment_fixture(int dim) {
    return make_experiment_fixture(make_sgt_fixture(dim));
}

ExperimentFixture make_experiment_fixture(const SemanticGuidanceTree& sgt) {
    ExperimentFixture fx;
    fx.sgt = sgt;
    fx.dim = sgt.subclasses.empty() || sgt.subclasses[0].instances.empty()
                 ? 16
                 : static_cast<int>(sgt.subclasses[0].instances[0].embedding.size());
    const int F = sgt.num_subclasses();

    auto sub = [&](const char* name, int fallback) {
        int i = sgt.find_subclass(name);
        return i >= 0 ? i : fallback % F;
    };
    fx.view_subclass = sub("direction", F - 1);
    // Layer 0 carries Object heads, layer 1 Attribute heads, layers 2-3 view
    // heads; unknown names degrade to a cyclic planting.
    fx.planted = {
        sub("animal", 0),   sub("animal", 0),   sub("vehicle", 1),  sub("vehicle", 1),
        sub("color", 2),    sub("color", 2),    sub("material", 3), sub("material", 3),
        fx.view_subclass,   fx.view_subclass,   fx.view_subclass,   fx.view_subclass,
        fx.view_subclass,   fx.view_subclass,   fx.view_subclass,   fx.view_subclass,
    };
    fx.stack = make_planted_stack(4, 4, fx.dim, fx.planted, F, fx.view_subclass);
    fx.tokens = make_token_set(F, fx.dim, fx.view_subclass);
    return fx;
}

GaussianCloud make_reference_cloud(int n, std::uint64_t seed) {
    if (n < 1) throw InvalidParameter("make_reference_cloud: n must be >= 1");
    std::mt19937_64 rng(seed ^ 0xc0ffee123456789aull);
    std::uniform_real_distribution<double> pos(-0.8, 0.8);
    std::uniform_real_distribution<double> sc(0.12, 0.25);
    std::uniform_real_distribution<double> op(0.6, 0.9);
    std::uniform_real_distribution<double> col(0.2, 1.0);
    std::normal_distribution<double> nrm(0.0, 1.0);

    GaussianCloud cloud;
    cloud.reserve(n);
    for (int i = 0; i < n; ++i) {
        Gaussian3D g;
        g.position = Vec3(pos(rng), pos(rng), pos(rng));
        Eigen::Vector4d q(nrm(rng), nrm(rng), nrm(rng), nrm(rng));
        q.normalize();
        g.rotation = Quat(q[0], q[1], q[2], q[3]);
        g.scale = Vec3(sc(rng), sc(rng), sc(rng));
        g.opacity = op(rng);
        g.color = Vec3(col(rng), col(rng), col(rng));
        cloud.push_back(g);
    }
    return cloud;
}

GaussianCloud make_initial_cloud(int n, std::uint64_t seed) {
    GaussianCloud cloud = make_reference_cloud(n, seed);
    std::mt19937_64 rng(seed ^ 0x5bd1e995aa110317ull);
    std::normal_distribution<double> jitter(0.0, 0.05);
    std::normal_distribution<double> cjitter(0.0, 0.1);
    for (auto& g : cloud) {
        g.position += Vec3(jitter(rng), jitter(rng), jitter(rng));
        g.color = (g.color + Vec3(cjitter(rng), cjitter(rng), cjitter(rng)))
                      .cwiseMax(0.0).cwiseMin(1.0);
    }
    return cloud;
}

double inconsistency_metric(const AttentionField& field, const GaussianCloud& cloud,
                            const std::vector<Camera>& heldout_views,
                            const std::vector<AttentionMap2D>& per_view_maps,
                            const RenderSettings& rs) {
    if (heldout_views.empty()) throw InvalidParameter("inconsistency_metric: no views");
    if (heldout_views.size() != per_view_maps.size()) {
        throw InvalidParameter("inconsistency_metric: views/maps size mismatch");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < heldout_views.size(); ++i) {
        AttentionMap2D rendered = render_attention(field, cloud, heldout_views[i], rs);
        if (rendered.values.maxCoeff() <= 0.0) {
            // Nothing splats yet; count the view as maximally inconsistent via
            // KL against a flat render instead of failing.
            rendered.values = Grid::Constant(rendered.values.rows(),
                                             rendered.values.cols(), 1.0);
        }
        acc += attn_kl_loss(rendered, per_view_maps[i]).loss;
    }
    return acc / heldout_views.size();
}

GenResult run_generation(const GaussianCloud& cloud0, const GenConfig& config,
                         const BiasSpec& bias, const SemanticGuidanceTree& sgt) {
    config.validate();
    if (cloud0.empty()) throw InvalidParameter("run_generation: empty initial cloud");

    RenderSettings rs;
    rs.threads = config.threads;

    GenResult res;
    res.cloud = cloud0;
    res.field = AttentionField(cloud0.size());
    res.views = build_view_ring(config.n_views, config.elevation, config.ring_radius,
                                config.focal, config.render_w, config.render_h);

    ExperimentFixture fx = make_experiment_fixture(sgt);
    const int F = sgt.num_subclasses();

    CAStack stack = fx.stack;
    if (config.ham_enabled && config.iter1 > 0) {
        stack = profiled_stack(fx, sgt, config.target_subclass, config.lambda_mod,
                               config.profile_probes, config.seed);
    }
    // Unbiased, unmodulated per-view maps at offset heldout cameras: the
    // fixed reference the inconsistency metric compares against.
    std::vector<Camera> heldout = offset_ring(
        config.heldout_views, config.elevation, config.ring_radius, config.focal,
        config.render_w, config.render_h, M_PI / config.n_views);
    BiasSpec clean = bias;
    clean.epsilon = 0.0;
    std::vector<AttentionMap2D> ref_maps;
    for (const Camera& cam : heldout) {
        QueryGrid q = make_view_query_grid(cam, cam.height, cam.width, clean, F,
                                           fx.view_subclass, fx.dim);
        ref_maps.push_back(mean_map(forward_all(fx.stack, q, fx.tokens,
                                                config.pixel_softmax)));
    }

    GaussianCloud reference = make_reference_cloud(config.n_gaussians, config.seed);
    std::vector<Image> targets;
    targets.reserve(res.views.cameras.size());
    for (const Camera& cam : res.views.cameras) {
        targets.push_back(render(reference, cam, RenderChannel::Color, rs).color);
    }

    TrainableGroups groups;
    const int n_views = static_cast<int>(res.views.cameras.size());

    for (int step = 0; step < config.iter2; ++step) {
        const int stage = step < config.iter0 ? 1 : (step < config.iter1 ? 2 : 3);
        const bool ham_active = config.ham_enabled && step < config.iter1;
        const bool attn_active = step >= config.iter0;
        if (!ham_active) stack.modulation.reset();

        double base_acc = 0.0, attn_acc = 0.0;
        for (int v = 0; v < config.views_per_step; ++v) {
            const int vi = (step * config.views_per_step + v) % n_views;
            const Camera& cam = res.views.cameras[vi];

            apply_field(res.field, res.cloud, config.raw_accumulation, rs.eps_vis);
            RenderOutput fwd = render(res.cloud, cam, RenderChannel::All, rs);

            RenderLoss base = l2_color_loss(targets[vi]);
            base_acc += base.value(fwd);
            Image gcolor;
            Grid gattn;
            base.grad(fwd, gcolor, gattn);

            QueryGrid query = make_view_query_grid(cam, cam.height, cam.width, bias, F,
                                                   fx.view_subclass, fx.dim);
            AttentionMap2D observed =
                mean_map(forward_all(stack, query, fx.tokens, config.pixel_softmax));
            observed.view_id = vi;

            if (attn_active) {
                AttentionMap2D rendered;
                rendered.values = fwd.attn;
                rendered.view_id = vi;
                KlResult kl = attn_kl_loss(rendered, observed);
                attn_acc += kl.loss;
                if (config.aag_enabled) {
                    // Guidance: descend lambda1 * KL on the per-Gaussian
                    // weights through the renderer. The consensus this drives
                    // toward suppresses view-inconsistent attention modes.
                    // Pixel-count scaling keeps the step size resolution-free.
                    Grid gattn =
                        (config.lambda1 * kl.grad_rendered.size()) * kl.grad_rendered;
                    ParamGrads agr =
                        render_backward(res.cloud, cam, fwd, nullptr, &gattn, rs);
                    for (std::size_t i = 0; i < res.field.size(); ++i) {
                        const double denom =
                            config.raw_accumulation
                                ? 1.0
                                : std::max(res.field.visibility[i], rs.eps_vis);
                        res.field.raw[i] = std::max(
                            0.0, res.field.raw[i] - config.guidance_rate *
                                                        agr.attn_weight[i] / denom);
                    }
                }
            }

            accumulate_view(res.field, res.cloud, cam, observed, fwd);
            ParamGrads grads = render_backward(res.cloud, cam, fwd, &gcolor, nullptr, rs);
            sgd_step(res.cloud, grads, config.lr, groups);
        }

        HistoryRow row;
        row.step = step;
        row.stage = stage;
        row.ham_active = ham_active;
        row.attn_active = attn_active;
        row.base_loss = base_acc / config.views_per_step;
        row.attn_loss = attn_acc / config.views_per_step;
        row.total = loss_total(Task::Generation, row.base_loss,
                               attn_active ? row.attn_loss : 0.0, config.lambda1, 0.0);
        row.inconsistency =
            inconsistency_metric(res.field, res.cloud, heldout, ref_maps, rs);
        res.history.push_back(row);

        const bool last = step + 1 == config.iter2;
        const int next_stage =
            step + 1 < config.iter0 ? 1 : (step + 1 < config.iter1 ? 2 : 3);
        if (last || next_stage != stage) res.stage_fields.emplace_back(stage, res.field);

        if (!std::isfinite(row.total) || row.total > 1e6) {
            res.diverged = true;
            break;
        }
    }
    return res;
}

Reprojection reproject(const Image& source_image, const Camera& source_cam,
                       const Grid& depth_of_target, const Camera& target_cam,
                       const Grid* source_depth, const RenderSettings& rs) {
    const int h = target_cam.height, w = target_cam.width;
    if (depth_of_target.rows() != h || depth_of_target.cols() != w) {
        throw InvalidParameter("reproject: depth/camera resolution mismatch");
    }
    Reprojection out;
    out.image = Image(h, w);
    out.validity = Grid::Zero(h, w);

    const Mat3 rt = target_cam.world_to_cam();
    const Mat3 rsrc = source_cam.world_to_cam();
    const Vec2 ct = target_cam.principal_point();
    const Vec2 cs = source_cam.principal_point();

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double d = depth_of_target(y, x);
            if (!(d > rs.near_plane)) continue;
            // Unproject through the target camera, re-express in the source.
            Vec3 t_cam((x - ct.x()) * d / target_cam.focal,
                       (y - ct.y()) * d / target_cam.focal, d);
            Vec3 world = rt.transpose() * t_cam + target_cam.eye;
            Vec3 s_cam = rsrc * (world - source_cam.eye);
            if (s_cam.z() <= rs.near_plane) continue;
            const double u = source_cam.focal * s_cam.x() / s_cam.z() + cs.x();
            const double v = source_cam.focal * s_cam.y() / s_cam.z() + cs.y();
            if (u < 0.0 || u > source_cam.width - 1 || v < 0.0 ||
                v > source_cam.height - 1) {
                continue;
            }
            if (source_depth) {
                const double ds = bilinear_at(*source_depth, v, u);
                if (!(ds > 0.0) ||
                    std::abs(ds - s_cam.z()) > 0.05 * std::max(ds, s_cam.z())) {
                    continue;
                }
            }
            out.image.r(y, x) = bilinear_at(source_image.r, v, u);
            out.image.g(y, x) = bilinear_at(source_image.g, v, u);
            out.image.b(y, x) = bilinear_at(source_image.b, v, u);
            out.validity(y, x) = 1.0;
        }
    }
    return out;
}

EditResult run_editing(const GaussianCloud& cloud, const ViewSet& views,
                       const std::vector<Image>& edit_target_images,
                       const EditConfig& config, const SemanticGuidanceTree& sgt,
                       const BiasSpec& bias) {
    const std::size_t n_views = views.cameras.size();
    config.validate(n_views);
    if (cloud.empty()) throw InvalidParameter("run_editing: empty cloud");
    if (edit_target_images.size() != n_views) {
        throw InvalidParameter("run_editing: need one target image per view");
    }

    RenderSettings rs;
    rs.threads = config.threads;

    ExperimentFixture fx = make_experiment_fixture(sgt);
    const int F = sgt.num_subclasses();
    CAStack stack = fx.stack;
    if (config.ham_enabled) {
        stack = profiled_stack(fx, sgt, config.target_subclass, config.lambda_mod,
                               config.profile_probes, config.seed);
    }

    EditResult res;
    res.cloud = cloud;
    res.field = AttentionField(cloud.size());

    // Stage 1: per-view candidate edits, blended by the normalized observed
    // attention, then scored and filtered to the top_k fusion set.
    std::vector<RenderOutput> base_renders;
    std::vector<Image> candidates;
    std::vector<AttentionMap2D> observed_maps;
    std::vector<double> scores;
    for (std::size_t k = 0; k < n_views; ++k) {
        const Camera& cam = views.cameras[k];
        if (edit_target_images[k].height() != cam.height ||
            edit_target_images[k].width() != cam.width) {
            throw InvalidParameter("run_editing: target image resolution mismatch at view " +
                                   std::to_string(k));
        }
        base_renders.push_back(render(res.cloud, cam, RenderChannel::All, rs));
        QueryGrid query = make_view_query_grid(cam, cam.height, cam.width, bias, F,
                                               fx.view_subclass, fx.dim);
        AttentionMap2D obs =
            mean_map(forward_all(stack, query, fx.tokens, config.pixel_softmax));
        obs.view_id = static_cast<int>(k);
        observed_maps.push_back(obs);

        Grid blend = obs.values / std::max(obs.values.maxCoeff(), 1e-12);
        const Image& rnd = base_renders[k].color;
        const Image& tgt = edit_target_images[k];
        Image cand(cam.height, cam.width);
        cand.r = blend.cwiseProduct(tgt.r) + (1.0 - blend.array()).matrix().cwiseProduct(rnd.r);
        cand.g = blend.cwiseProduct(tgt.g) + (1.0 - blend.array()).matrix().cwiseProduct(rnd.g);
        cand.b = blend.cwiseProduct(tgt.b) + (1.0 - blend.array()).matrix().cwiseProduct(rnd.b);
        candidates.push_back(cand);

        double score = 0.0;
        if (config.scorer == "l2-to-target") {
            double n = 3.0 * cand.r.size();
            score = -((cand.r - tgt.r).squaredNorm() + (cand.g - tgt.g).squaredNorm() +
                      (cand.b - tgt.b).squaredNorm()) / n;
        }
        scores.push_back(score);
    }

    std::vector<std::size_t> order(n_views);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });
    std::vector<std::size_t> fusion_set;
    for (std::size_t i = 0; i < order.size() && fusion_set.size() <
                                                     static_cast<std::size_t>(config.top_k);
         ++i) {
        if (std::isfinite(scores[order[i]])) fusion_set.push_back(order[i]);
    }
    if (fusion_set.empty()) throw InvalidParameter("run_editing: empty fusion set");

    // Stage 2: masked fusion of the top candidates into a per-view guidance
    // image, then the inner optimization against it.
    std::vector<Grid> masks;
    for (std::size_t k = 0; k < n_views; ++k) {
        if (config.mask_source == "fixture") {
            const Grid& m = config.fixture_masks[k];
            if (m.rows() != views.cameras[k].height || m.cols() != views.cameras[k].width) {
                throw InvalidParameter("run_editing: mask resolution mismatch at view " +
                                       std::to_string(k));
            }
            masks.push_back(m);
        } else {
            masks.push_back(Grid::Ones(views.cameras[k].height, views.cameras[k].width));
        }
    }

    std::vector<Image> guidance;
    for (std::size_t k = 0; k < n_views; ++k) {
        const Camera& cam = views.cameras[k];
        Image sum(cam.height, cam.width);
        Grid count = Grid::Zero(cam.height, cam.width);
        for (std::size_t j : fusion_set) {
            if (j == k) {
                sum.r += candidates[k].r;
                sum.g += candidates[k].g;
                sum.b += candidates[k].b;
                count.array() += 1.0;
                continue;
            }
            Grid src_depth = base_renders[j].depth;
            Reprojection rp = reproject(candidates[j], views.cameras[j],
                                        base_renders[k].depth, cam, &src_depth, rs);
            sum.r += rp.validity.cwiseProduct(rp.image.r);
            sum.g += rp.validity.cwiseProduct(rp.image.g);
            sum.b += rp.validity.cwiseProduct(rp.image.b);
            count += rp.validity;
        }
        const Image& fallback = base_renders[k].color;
        Image fused(cam.height, cam.width);
        for (int y = 0; y < cam.height; ++y) {
            for (int x = 0; x < cam.width; ++x) {
                if (count(y, x) > 0.0) {
                    fused.r(y, x) = sum.r(y, x) / count(y, x);
                    fused.g(y, x) = sum.g(y, x) / count(y, x);
                    fused.b(y, x) = sum.b(y, x) / count(y, x);
                } else {
                    fused.r(y, x) = fallback.r(y, x);
                    fused.g(y, x) = fallback.g(y, x);
                    fused.b(y, x) = fallback.b(y, x);
                }
            }
        }
        Image guide(cam.height, cam.width);
        const Grid& m = masks[k];
        guide.r = m.cwiseProduct(fused.r) + (1.0 - m.array()).matrix().cwiseProduct(fallback.r);
        guide.g = m.cwiseProduct(fused.g) + (1.0 - m.array()).matrix().cwiseProduct(fallback.g);
        guide.b = m.cwiseProduct(fused.b) + (1.0 - m.array()).matrix().cwiseProduct(fallback.b);
        guidance.push_back(guide);
    }
    res.fused_guidance = guidance;

    TrainableGroups groups;
    for (int step = 0; step < config.iter; ++step) {
        const std::size_t vi = static_cast<std::size_t>(step) % n_views;
        const Camera& cam = views.cameras[vi];
        const Grid& m = masks[vi];
        const Image& guide = guidance[vi];

        apply_field(res.field, res.cloud, false, rs.eps_vis);
        RenderOutput fwd = render(res.cloud, cam, RenderChannel::All, rs);

        const double n = 3.0 * m.size();
        Grid dr = fwd.color.r - guide.r;
        Grid dg = fwd.color.g - guide.g;
        Grid db = fwd.color.b - guide.b;
        double base = (m.cwiseProduct(dr).cwiseProduct(dr).sum() +
                       m.cwiseProduct(dg).cwiseProduct(dg).sum() +
                       m.cwiseProduct(db).cwiseProduct(db).sum()) / n;
        Image gcolor(cam.height, cam.width);
        gcolor.r = 2.0 * m.cwiseProduct(dr) / n;
        gcolor.g = 2.0 * m.cwiseProduct(dg) / n;
        gcolor.b = 2.0 * m.cwiseProduct(db) / n;

        AttentionMap2D observed = observed_maps[vi];
        double attn = 0.0;
        bool have_mass = m.sum() > 0.0;
        if (config.lambda2 > 0.0 && have_mass && fwd.attn.maxCoeff() > 0.0) {
            AttentionMap2D rendered;
            rendered.values = fwd.attn;
            KlResult kl = attn_kl_loss(rendered, observed);
            attn = kl.loss;
            Grid gattn = (config.lambda2 * kl.grad_rendered.size()) * kl.grad_rendered;
            ParamGrads agr = render_backward(res.cloud, cam, fwd, nullptr, &gattn, rs);
            for (std::size_t i = 0; i < res.field.size(); ++i) {
                const double denom = std::max(res.field.visibility[i], rs.eps_vis);
                res.field.raw[i] = std::max(
                    0.0, res.field.raw[i] -
                             config.guidance_rate * agr.attn_weight[i] / denom);
            }
        }
        if (have_mass) accumulate_view(res.field, res.cloud, cam, observed, fwd);

        ParamGrads grads = render_backward(res.cloud, cam, fwd, &gcolor, nullptr, rs);
        sgd_step(res.cloud, grads, config.lr, groups);

        HistoryRow row;
        row.step = step;
        row.stage = 2;
        row.base_loss = base;
        row.attn_loss = attn;
        row.total = loss_total(Task::Editing, base, attn, 0.0, config.lambda2);
        row.attn_active = attn > 0.0;
        res.history.push_back(row);
        if (!std::isfinite(row.total) || row.total > 1e6) {
            res.diverged = true;
            break;
        }
    }
    return res;
}

}  // namespace tdattn
