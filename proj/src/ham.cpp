#include "tdattn/ham.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "json.hpp"

namespace tdattn {

int SemanticGuidanceTree::find_subclass(const std::string& name) const {
    for (int f = 0; f < num_subclasses(); ++f) {
        if (subclasses[f].name == name) return f;
    }
    return -1;
}

SemanticGuidanceTree parse_sgt(const std::string& json_text, int expect_dim) {
    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidParameter(std::string("sgt: malformed JSON: ") + e.what());
    }
    if (!doc.is_object()) throw InvalidParameter("sgt: root must be an object of classes");

    SemanticGuidanceTree sgt;
    std::vector<std::string> seen_subclasses;
    for (auto& [class_name, class_body] : doc.items()) {
        if (!class_body.is_object()) {
            throw InvalidParameter("sgt: class '" + class_name + "' must map subclasses");
        }
        int class_index = static_cast<int>(sgt.class_names.size());
        sgt.class_names.push_back(class_name);
        for (auto& [sub_name, instances] : class_body.items()) {
            std::string path = class_name + "/" + sub_name;
            for (const auto& prev : seen_subclasses) {
                if (prev == sub_name) {
                    throw InvalidParameter("sgt: subclass '" + sub_name +
                                           "' appears under more than one class");
                }
            }
            seen_subclasses.push_back(sub_name);
            if (!instances.is_array() || instances.empty()) {
                throw InvalidParameter("sgt: subclass '" + path + "' has no instances");
            }
            SemanticGuidanceTree::SubClass sc;
            sc.name = sub_name;
            sc.class_index = class_index;
            for (const auto& inst : instances) {
                if (!inst.contains("word") || !inst.contains("embedding")) {
                    throw InvalidParameter("sgt: instance in '" + path +
                                           "' missing word/embedding");
                }
                SemanticGuidanceTree::Instance in;
                in.word = inst["word"].get<std::string>();
                auto vals = inst["embedding"].get<std::vector<double>>();
                if (static_cast<int>(vals.size()) != expect_dim) {
                    throw InvalidParameter("sgt: instance '" + path + "/" + in.word +
                                           "' embedding dimension mismatch");
                }
                in.embedding = Eigen::Map<Eigen::VectorXd>(vals.data(), vals.size());
                sc.instances.push_back(std::move(in));
            }
            sgt.subclasses.push_back(std::move(sc));
        }
    }
    if (sgt.num_classes() < 2) throw InvalidParameter("sgt: need at least 2 classes");
    return sgt;
}

std::string sgt_to_json(const SemanticGuidanceTree& sgt) {
    nlohmann::ordered_json doc;
    for (int m = 0; m < sgt.num_classes(); ++m) {
        nlohmann::ordered_json cls;
        for (const auto& sc : sgt.subclasses) {
            if (sc.class_index != m) continue;
            nlohmann::ordered_json arr = nlohmann::ordered_json::array();
            for (const auto& in : sc.instances) {
                std::vector<double> emb(in.embedding.data(),
                                        in.embedding.data() + in.embedding.size());
                arr.push_back({{"word", in.word}, {"embedding", emb}});
            }
            cls[sc.name] = arr;
        }
        doc[sgt.class_names[m]] = cls;
    }
    return doc.dump(2);
}

SemanticGuidanceTree make_sgt_fixture(int dim) {
    struct Entry {
        const char* cls;
        const char* sub;
        std::vector<const char*> words;
    };
    const std::vector<Entry> entries = {
        {"Object", "animal", {"squirrel", "pikachu", "fox"}},
        {"Object", "vehicle", {"car", "truck", "boat"}},
        {"Attribute", "color", {"red", "apricot", "blue"}},
        {"Attribute", "material", {"marble", "wood", "metal"}},
        {"View", "direction", {"front", "back", "side"}},
    };
    const int num_subclasses = static_cast<int>(entries.size());
    if (dim < num_subclasses + 3) {
        throw InvalidParameter("make_sgt_fixture: dim too small");
    }

    SemanticGuidanceTree sgt;
    int f = 0;
    for (const auto& e : entries) {
        int class_index = -1;
        for (int m = 0; m < sgt.num_classes(); ++m) {
            if (sgt.class_names[m] == e.cls) class_index = m;
        }
        if (class_index < 0) {
            class_index = sgt.num_classes();
            sgt.class_names.push_back(e.cls);
        }
        SemanticGuidanceTree::SubClass sc;
        sc.name = e.sub;
        sc.class_index = class_index;
        int j = 0;
        for (const char* word : e.words) {
            Eigen::VectorXd emb = subclass_direction(f, dim);
            // Distinct instances within a subclass: a small component in a
            // spare dim, orthogonal to every scoring direction.
            int spare = num_subclasses + 2 + (j % (dim - num_subclasses - 2));
            emb[spare] += 0.05;
            sc.instances.push_back({word, emb});
            ++j;
        }
        sgt.subclasses.push_back(std::move(sc));
        ++f;
    }
    return sgt;
}

namespace {

double pooled_score(const CAStack& stack, int layer, int head,
                    const QueryGrid& probe, const Eigen::VectorXd& key) {
    const HeadParams& hp = stack.head(layer, head);
    Eigen::VectorXd k = hp.wk * key;
    // AvgPool over pixels of (Wq q) . k / sqrt(d)
    Eigen::VectorXd mean_q = probe.q.colwise().mean();
    return (hp.wq * mean_q).dot(k) / std::sqrt(double(stack.dim));
}

}  // namespace

int srp_head_scores(const CAStack& stack, int layer, int head,
                    const QueryGrid& probe, const SemanticGuidanceTree& sgt,
                    const std::vector<int>& instance_sample) {
    if (probe.q.rows() == 0) throw InvalidParameter("srp_head_scores: empty probe set");
    if (instance_sample.size() != static_cast<std::size_t>(sgt.num_subclasses())) {
        throw InvalidParameter("srp_head_scores: need one instance per subclass");
    }
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int f = 0; f < sgt.num_subclasses(); ++f) {
        const auto& inst = sgt.subclasses[f].instances[instance_sample[f]];
        double s = pooled_score(stack, layer, head, probe, inst.embedding);
        if (s > best_score) {
            best_score = s;
            best = f;
        }
    }
    return best;
}

int srp_layer_scores(const CAStack& stack, int layer, const QueryGrid& probe,
                     const SemanticGuidanceTree& sgt,
                     const std::vector<int>& instance_sample) {
    if (stack.num_heads < 1) throw InvalidParameter("srp_layer_scores: empty layer");
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int m = 0; m < sgt.num_classes(); ++m) {
        double s = 0.0;
        for (int f = 0; f < sgt.num_subclasses(); ++f) {
            if (sgt.subclasses[f].class_index != m) continue;
            const auto& inst = sgt.subclasses[f].instances[instance_sample[f]];
            for (int h = 0; h < stack.num_heads; ++h) {
                s += pooled_score(stack, layer, h, probe, inst.embedding);
            }
        }
        if (s > best_score) {
            best_score = s;
            best = m;
        }
    }
    return best;
}

void accumulate_weights(WeightMatrices& matrices,
                        const std::vector<QueryGrid>& probes,
                        const CAStack& stack, const SemanticGuidanceTree& sgt,
                        std::uint64_t sample_seed) {
    if (probes.empty()) throw InvalidParameter("accumulate_weights: empty probe set");
    std::mt19937_64 rng(sample_seed);
    for (const QueryGrid& probe : probes) {
        std::vector<int> sample(sgt.num_subclasses());
        for (int f = 0; f < sgt.num_subclasses(); ++f) {
            std::uniform_int_distribution<int> pick(
                0, static_cast<int>(sgt.subclasses[f].instances.size()) - 1);
            sample[f] = pick(rng);
        }
        for (int l = 0; l < stack.num_layers; ++l) {
            for (int h = 0; h < stack.num_heads; ++h) {
                int f = srp_head_scores(stack, l, h, probe, sgt, sample);
                matrices.head_weights(f, l * stack.num_heads + h) += 1.0;
            }
            int m = srp_layer_scores(stack, l, probe, sgt, sample);
            matrices.layer_weights(m, l) += 1.0;
        }
        ++matrices.probes_seen;
    }
}

void modulate(CAStack& stack, const WeightMatrices& matrices,
              const SemanticGuidanceTree& sgt, const std::string& target_subclass,
              double lambda, const TokenSet& tokens, int token_index,
              bool pre_softmax) {
    int f_star = sgt.find_subclass(target_subclass);
    if (f_star < 0) {
        throw InvalidParameter("modulate: unknown subclass '" + target_subclass + "'");
    }
    if (!(lambda > 0.0)) throw InvalidParameter("modulate: lambda must be positive");
    if (matrices.probes_seen <= 0) throw InvalidParameter("modulate: no probes accumulated");
    int m_star = sgt.subclasses[f_star].class_index;

    Modulation mod;
    mod.token_index = token_index < 0 ? tokens.subject_index : token_index;
    mod.pre_softmax = pre_softmax;
    mod.gain = Eigen::MatrixXd::Zero(stack.num_layers, stack.num_heads);
    double inv_n = 1.0 / matrices.probes_seen;
    for (int l = 0; l < stack.num_layers; ++l) {
        double wl = matrices.layer_weights(m_star, l) * inv_n;
        for (int h = 0; h < stack.num_heads; ++h) {
            double wh = matrices.head_weights(f_star, l * stack.num_heads + h) * inv_n;
            mod.gain(l, h) = lambda * wl * wh;
        }
    }
    stack.modulation = mod;
}

std::string head_weights_csv(const WeightMatrices& m, const SemanticGuidanceTree& sgt,
                             int heads_per_layer) {
    std::ostringstream os;
    os << "subclass";
    for (int c = 0; c < m.head_weights.cols(); ++c) {
        os << ",l" << c / heads_per_layer << "h" << c % heads_per_layer;
    }
    os << "\n";
    for (int f = 0; f < m.head_weights.rows(); ++f) {
        os << sgt.subclasses[f].name;
        for (int c = 0; c < m.head_weights.cols(); ++c) os << "," << m.head_weights(f, c);
        os << "\n";
    }
    return os.str();
}

std::string layer_weights_csv(const WeightMatrices& m, const SemanticGuidanceTree& sgt) {
    std::ostringstream os;
    os << "class";
    for (int l = 0; l < m.layer_weights.cols(); ++l) os << ",l" << l;
    os << "\n";
    for (int c = 0; c < m.layer_weights.rows(); ++c) {
        os << sgt.class_names[c];
        for (int l = 0; l < m.layer_weights.cols(); ++l) os << "," << m.layer_weights(c, l);
        os << "\n";
    }
    return os.str();
}

}  // namespace tdattn
