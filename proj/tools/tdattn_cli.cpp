// tdattn: attention-guided 3D Gaussian splatting experiments.
//
// Subcommands: generate, edit, profile, biaslab. Exit codes: 0 success,
// 2 input error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "tdattn/bias_lab.hpp"
#include "tdattn/io.hpp"
#include "tdattn/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace tdattn;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::optional<double> lambda1;
    std::optional<double> lambda2;
    std::optional<std::vector<int>> stage_override;
    bool flag_raw_accumulation = false;
    bool flag_pixel_softmax = false;
};

ordered_json load_config(const CommonFlags& flags, std::string& raw_text) {
    if (!fs::exists(flags.config_path)) {
        throw InvalidParameter("config not found: " + flags.config_path);
    }
    raw_text = read_text_file(flags.config_path);
    try {
        return ordered_json::parse(raw_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidParameter("config " + flags.config_path + ": malformed JSON: " +
                               e.what());
    }
}

fs::path prepare_out(const CommonFlags& flags) {
    fs::path out(flags.out_dir);
    fs::create_directories(out);
    return out;
}

void write_manifest(const std::string& command, const CommonFlags& flags,
                    const std::string& config_text, std::uint64_t seed,
                    const fs::path& out) {
    RunManifest m = make_manifest(command, flags.config_path, config_text,
                                  flags.out_dir, seed);
    write_text_file(m.to_json(), out / "manifest.json");
}

GenConfig parse_gen_config(const ordered_json& j, const CommonFlags& flags) {
    GenConfig c;
    c.iter0 = j.value("iter0", c.iter0);
    c.iter1 = j.value("iter1", c.iter1);
    c.iter2 = j.value("iter2", c.iter2);
    c.lambda1 = j.value("lambda1", c.lambda1);
    c.lr = j.value("lr", c.lr);
    c.views_per_step = j.value("views_per_step", c.views_per_step);
    c.seed = j.value("seed", c.seed);
    c.ham_enabled = j.value("ham_enabled", c.ham_enabled);
    c.aag_enabled = j.value("aag_enabled", c.aag_enabled);
    c.target_subclass = j.value("target_subclass", c.target_subclass);
    c.lambda_mod = j.value("lambda_mod", c.lambda_mod);
    c.n_views = j.value("n_views", c.n_views);
    c.render_w = j.value("render_w", c.render_w);
    c.render_h = j.value("render_h", c.render_h);
    c.n_gaussians = j.value("n_gaussians", c.n_gaussians);
    c.ring_radius = j.value("ring_radius", c.ring_radius);
    c.focal = j.value("focal", c.focal);
    c.elevation = j.value("elevation", c.elevation);
    c.guidance_rate = j.value("guidance_rate", c.guidance_rate);
    c.heldout_views = j.value("heldout_views", c.heldout_views);
    c.profile_probes = j.value("profile_probes", c.profile_probes);
    c.raw_accumulation = j.value("raw_accumulation", c.raw_accumulation);
    c.pixel_softmax = j.value("pixel_softmax", c.pixel_softmax);
    c.threads = j.value("threads", c.threads);

    if (flags.seed) c.seed = *flags.seed;
    if (flags.threads) c.threads = *flags.threads;
    if (flags.lambda1) c.lambda1 = *flags.lambda1;
    if (flags.stage_override) {
        const auto& s = *flags.stage_override;
        if (s.size() != 3) throw InvalidParameter("--stage-override needs a,b,c");
        c.iter0 = s[0];
        c.iter1 = s[1];
        c.iter2 = s[2];
    }
    if (flags.flag_raw_accumulation) c.raw_accumulation = true;
    if (flags.flag_pixel_softmax) c.pixel_softmax = true;
    return c;
}

BiasSpec parse_bias(const ordered_json& j) {
    BiasSpec b;
    if (!j.contains("bias")) return b;
    const auto& bj = j.at("bias");
    b.epsilon = bj.value("epsilon", b.epsilon);
    b.prior_view = bj.value("prior_view", b.prior_view);
    b.prior_sigma = bj.value("prior_sigma", b.prior_sigma);
    b.target_sigma = bj.value("target_sigma", b.target_sigma);
    if (bj.contains("prior_center")) {
        b.prior_center = Vec2(bj["prior_center"].at(0), bj["prior_center"].at(1));
    }
    if (bj.contains("target_anchor")) {
        b.target_anchor = Vec3(bj["target_anchor"].at(0), bj["target_anchor"].at(1),
                               bj["target_anchor"].at(2));
    }
    if (b.epsilon < 0.0 || b.epsilon > 1.0) {
        throw InvalidParameter("bias: epsilon must be in [0,1]");
    }
    return b;
}

SemanticGuidanceTree config_sgt(const ordered_json& j, const fs::path& config_dir,
                                int dim) {
    if (j.contains("sgt")) return parse_sgt(j.at("sgt").dump(), dim);
    if (j.contains("sgt_path")) {
        fs::path p = j.at("sgt_path").get<std::string>();
        if (p.is_relative()) p = config_dir / p;
        return parse_sgt(read_text_file(p), dim);
    }
    return make_sgt_fixture(dim);
}

void write_history(const std::vector<HistoryRow>& rows, const fs::path& out) {
    write_text_file(history_csv(rows), out / "history.csv");
}

void write_attention_pgm(const AttentionField& field, const GaussianCloud& cloud,
                         const Camera& cam, const fs::path& path) {
    AttentionMap2D map = render_attention(field, cloud, cam);
    double peak = map.values.maxCoeff();
    write_pgm16(map.values, path, peak > 0.0 ? peak : 1.0);
}

int cmd_generate(const CommonFlags& flags) {
    std::string text;
    ordered_json j = load_config(flags, text);
    GenConfig config = parse_gen_config(j, flags);
    config.validate();
    BiasSpec bias = parse_bias(j);
    SemanticGuidanceTree sgt =
        config_sgt(j, fs::path(flags.config_path).parent_path(), 16);

    fs::path out = prepare_out(flags);
    GaussianCloud cloud0 = make_initial_cloud(config.n_gaussians, config.seed);
    GenResult res = run_generation(cloud0, config, bias, sgt);

    Scene scene;
    scene.cloud = res.cloud;
    scene.views = res.views;
    if (res.field.views_accumulated > 0) scene.field = res.field;
    save_scene(scene, out / "scene.json");
    write_history(res.history, out);
    for (const auto& [stage, field] : res.stage_fields) {
        write_attention_pgm(field, res.cloud, res.views.cameras[0],
                            out / ("attn_stage" + std::to_string(stage) + ".pgm"));
    }
    write_manifest("generate", flags, text, config.seed, out);
    if (res.diverged) {
        std::cerr << "generate: loss diverged; history written to " << out << "\n";
        return 3;
    }
    return 0;
}

EditConfig parse_edit_config(const ordered_json& j, const CommonFlags& flags) {
    EditConfig c;
    c.iter = j.value("iter", c.iter);
    c.lambda2 = j.value("lambda2", c.lambda2);
    c.top_k = j.value("top_k", c.top_k);
    c.mask_source = j.value("mask_source", c.mask_source);
    c.scorer = j.value("scorer", c.scorer);
    c.seed = j.value("seed", c.seed);
    c.lr = j.value("lr", c.lr);
    c.ham_enabled = j.value("ham_enabled", c.ham_enabled);
    c.target_subclass = j.value("target_subclass", c.target_subclass);
    c.lambda_mod = j.value("lambda_mod", c.lambda_mod);
    c.guidance_rate = j.value("guidance_rate", c.guidance_rate);
    c.profile_probes = j.value("profile_probes", c.profile_probes);
    c.pixel_softmax = j.value("pixel_softmax", c.pixel_softmax);
    c.threads = j.value("threads", c.threads);

    if (flags.seed) c.seed = *flags.seed;
    if (flags.threads) c.threads = *flags.threads;
    if (flags.lambda2) c.lambda2 = *flags.lambda2;
    if (flags.flag_pixel_softmax) c.pixel_softmax = true;
    return c;
}

int cmd_edit(const CommonFlags& flags) {
    std::string text;
    ordered_json j = load_config(flags, text);
    EditConfig config = parse_edit_config(j, flags);
    BiasSpec bias = parse_bias(j);
    fs::path config_dir = fs::path(flags.config_path).parent_path();
    SemanticGuidanceTree sgt = config_sgt(j, config_dir, 16);

    // Scene: either a saved scene.json or a procedural cloud + view ring.
    Scene scene;
    if (j.contains("scene")) {
        fs::path p = j.at("scene").get<std::string>();
        if (p.is_relative()) p = config_dir / p;
        scene = load_scene(p);
        if (scene.views.cameras.empty()) {
            throw InvalidParameter("edit: scene has no cameras");
        }
    } else {
        scene.cloud = make_reference_cloud(j.value("n_gaussians", 64), config.seed);
        scene.views = build_view_ring(j.value("n_views", 4), j.value("elevation", 0.3),
                                      j.value("ring_radius", 4.0), j.value("focal", 40.0),
                                      j.value("render_w", 32), j.value("render_h", 32));
    }
    const std::size_t n_views = scene.views.cameras.size();

    // The synthetic "edit": renders of the current cloud pushed toward a tint.
    Vec3 tint(0.9, 0.2, 0.2);
    double tint_strength = j.value("tint_strength", 0.5);
    if (j.contains("tint")) {
        tint = Vec3(j["tint"].at(0), j["tint"].at(1), j["tint"].at(2));
    }
    std::vector<Image> targets;
    RenderSettings rs;
    rs.threads = config.threads;
    for (const Camera& cam : scene.views.cameras) {
        Image base = render(scene.cloud, cam, RenderChannel::Color, rs).color;
        Image t(cam.height, cam.width);
        t.r = ((1.0 - tint_strength) * base.r.array() + tint_strength * tint.x()).matrix();
        t.g = ((1.0 - tint_strength) * base.g.array() + tint_strength * tint.y()).matrix();
        t.b = ((1.0 - tint_strength) * base.b.array() + tint_strength * tint.z()).matrix();
        targets.push_back(t);
    }

    if (config.mask_source == "fixture") {
        // Fixture mask: ones inside a normalized rectangle [x0,y0,x1,y1].
        std::vector<double> rect = j.value("mask_rect", std::vector<double>{0, 0, 0, 0});
        if (rect.size() != 4) throw InvalidParameter("edit: mask_rect needs 4 entries");
        for (const Camera& cam : scene.views.cameras) {
            Grid m = Grid::Zero(cam.height, cam.width);
            for (int y = 0; y < cam.height; ++y) {
                for (int x = 0; x < cam.width; ++x) {
                    double nx = cam.width > 1 ? double(x) / (cam.width - 1) : 0.0;
                    double ny = cam.height > 1 ? double(y) / (cam.height - 1) : 0.0;
                    if (nx >= rect[0] && ny >= rect[1] && nx < rect[2] && ny < rect[3]) {
                        m(y, x) = 1.0;
                    }
                }
            }
            config.fixture_masks.push_back(m);
        }
    }
    config.validate(n_views);

    fs::path out = prepare_out(flags);
    EditResult res = run_editing(scene.cloud, scene.views, targets, config, sgt, bias);

    Scene out_scene;
    out_scene.cloud = res.cloud;
    out_scene.views = scene.views;
    if (res.field.views_accumulated > 0) out_scene.field = res.field;
    save_scene(out_scene, out / "scene.json");
    write_history(res.history, out);
    for (std::size_t k = 0; k < res.fused_guidance.size(); ++k) {
        write_ppm(res.fused_guidance[k], out / ("fused_" + std::to_string(k) + ".ppm"));
    }
    write_manifest("edit", flags, text, config.seed, out);
    if (res.diverged) {
        std::cerr << "edit: loss diverged; history written to " << out << "\n";
        return 3;
    }
    return 0;
}

int cmd_profile(const CommonFlags& flags) {
    std::string text;
    ordered_json j = load_config(flags, text);
    std::uint64_t seed = j.value("seed", std::uint64_t{1});
    if (flags.seed) seed = *flags.seed;
    int n_probes = j.value("probes", 50);
    int dim = j.value("dim", 16);
    if (n_probes < 1) throw InvalidParameter("profile: probes must be >= 1");

    SemanticGuidanceTree sgt =
        config_sgt(j, fs::path(flags.config_path).parent_path(), dim);
    ExperimentFixture fx = make_experiment_fixture(sgt);

    std::vector<QueryGrid> probes;
    for (int i = 0; i < n_probes; ++i) {
        probes.push_back(make_probe_query_grid(seed + 0x9e3779b97f4a7c15ull * (i + 1),
                                               8, 8, fx.dim, sgt.num_subclasses()));
    }
    WeightMatrices wm(sgt.num_classes(), sgt.num_subclasses(), fx.stack.num_layers,
                      fx.stack.num_heads);
    accumulate_weights(wm, probes, fx.stack, sgt, seed);

    fs::path out = prepare_out(flags);
    write_text_file(head_weights_csv(wm, sgt, fx.stack.num_heads),
                    out / "head_weights.csv");
    write_text_file(layer_weights_csv(wm, sgt), out / "layer_weights.csv");
    write_manifest("profile", flags, text, seed, out);
    return 0;
}

int cmd_biaslab(const CommonFlags& flags) {
    std::string text;
    ordered_json j = load_config(flags, text);

    DiscreteViewModel model;
    model.azimuths = j.at("azimuths").get<std::vector<double>>();
    auto prior = j.at("p_prior").get<std::vector<double>>();
    model.p_prior = Eigen::Map<Eigen::VectorXd>(prior.data(), prior.size());
    int v_star = j.value("v_star", 0);
    auto grid = j.value("epsilon_grid", std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
    std::uint64_t seed = j.value("seed", std::uint64_t{1});
    if (flags.seed) seed = *flags.seed;

    std::optional<JointTable> table;
    if (j.contains("joint_table")) {
        JointTable t;
        t.num_views = j["joint_table"].at("num_views");
        t.num_states = j["joint_table"].at("num_states");
        t.p = j["joint_table"].at("p").get<std::vector<double>>();
        table = t;
    }

    std::ostringstream csv;
    csv << "epsilon,R,regime,C\n" << std::setprecision(17);
    for (double eps : grid) {
        model.epsilon = eps;
        model.joint_table = table;
        model.validate();
        double r = preference_ratio(model, v_star);
        Regime regime = classify_regime(r, eps);

        double c;
        if (table) {
            c = coupling_C(*table, v_star, 1, 0);
        } else {
            // Implied joint: evidence present (y=1) gives the mixture
            // posterior, absent gives the raw prior, each with mass 1/2.
            Eigen::VectorXd post = posterior_mixture(model, v_star);
            double marginal = 0.5 * (post[v_star] + model.p_prior[v_star]);
            if (marginal <= 0.0) {
                throw InvalidParameter("biaslab: unsupported conditioning");
            }
            c = post[v_star] / marginal;
        }
        csv << eps << ',' << r << ',' << regime_name(regime) << ',' << c << '\n';
    }

    fs::path out = prepare_out(flags);
    write_text_file(csv.str(), out / "sweep.csv");
    write_manifest("biaslab", flags, text, seed, out);
    return 0;
}

void add_common(CLI::App* app, CommonFlags& flags, bool gen_flags, bool edit_flags) {
    app->add_option("--config", flags.config_path, "Config JSON path")->required();
    app->add_option("--out", flags.out_dir, "Output directory");
    auto seed_opt = app->add_option("--seed", "Seed override");
    seed_opt->each([&flags](const std::string& s) {
        flags.seed = std::stoull(s);
    });
    auto threads_opt = app->add_option("--threads", "Thread count override");
    threads_opt->each([&flags](const std::string& s) {
        flags.threads = std::stoi(s);
    });
    if (gen_flags) {
        auto so = app->add_option("--stage-override", "iter0,iter1,iter2");
        so->each([&flags](const std::string& s) {
            std::vector<int> parts;
            std::stringstream ss(s);
            std::string item;
            while (std::getline(ss, item, ',')) parts.push_back(std::stoi(item));
            flags.stage_override = parts;
        });
        auto l1 = app->add_option("--lambda1", "Attention loss weight (generation)");
        l1->each([&flags](const std::string& s) { flags.lambda1 = std::stod(s); });
        app->add_flag("--flag-raw-accumulation", flags.flag_raw_accumulation,
                      "Keep raw multi-view sums instead of visibility averages");
    }
    if (edit_flags) {
        auto l2 = app->add_option("--lambda2", "Attention loss weight (editing)");
        l2->each([&flags](const std::string& s) { flags.lambda2 = std::stod(s); });
    }
    app->add_flag("--flag-pixel-softmax", flags.flag_pixel_softmax,
                  "Normalize attention logits over pixels instead of tokens");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attention-guided 3D Gaussian splatting toolkit"};
    app.require_subcommand(1);

    CommonFlags gen_flags, edit_flags, profile_flags, biaslab_flags;
    CLI::App* gen = app.add_subcommand("generate", "Staged multi-view generation");
    add_common(gen, gen_flags, true, false);
    CLI::App* edit = app.add_subcommand("edit", "Masked multi-view-fused editing");
    add_common(edit, edit_flags, false, true);
    CLI::App* profile = app.add_subcommand("profile", "Head/layer relevance profiling");
    add_common(profile, profile_flags, false, false);
    CLI::App* biaslab = app.add_subcommand("biaslab", "View-bias model sweep");
    add_common(biaslab, biaslab_flags, false, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_generate(gen_flags);
        if (edit->parsed()) return cmd_edit(edit_flags);
        if (profile->parsed()) return cmd_profile(profile_flags);
        if (biaslab->parsed()) return cmd_biaslab(biaslab_flags);
    } catch (const NumericalFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const InvalidParameter& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
