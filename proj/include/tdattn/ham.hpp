#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tdattn/attention_stack.hpp"

namespace tdattn {

/// Three levels: Semantic-Classes -> Sub-Classes -> instance words.
struct SemanticGuidanceTree {
    struct Instance {
        std::string word;
        Eigen::VectorXd embedding;
    };
    struct SubClass {
        std::string name;
        int class_index = 0;
        std::vector<Instance> instances;
    };

    std::vector<std::string> class_names;  // M entries
    std::vector<SubClass> subclasses;      // F entries, document order

    int num_classes() const { return static_cast<int>(class_names.size()); }
    int num_subclasses() const { return static_cast<int>(subclasses.size()); }
    int find_subclass(const std::string& name) const;
};

/// Parses {"Class": {"Subclass": [{"word": ..., "embedding": [...]}, ...]}}.
/// Validation failures name the offending path.
SemanticGuidanceTree parse_sgt(const std::string& json_text, int expect_dim);
std::string sgt_to_json(const SemanticGuidanceTree& sgt);

/// The planted fixture used by tests and the default CLI experiment:
/// classes Object / Attribute / View over five subclasses.
SemanticGuidanceTree make_sgt_fixture(int dim);

/// Head columns are indexed l * num_heads + h across all layers.
struct WeightMatrices {
    Eigen::MatrixXd layer_weights;  // M x L
    Eigen::MatrixXd head_weights;   // F x (L*H)
    int probes_seen = 0;

    WeightMatrices() = default;
    WeightMatrices(int m, int f, int layers, int heads_per_layer)
        : layer_weights(Eigen::MatrixXd::Zero(m, layers)),
          head_weights(Eigen::MatrixXd::Zero(f, layers * heads_per_layer)) {}
};

/// argmax_f of AvgPool(Q_h K_f^T / sqrt(d)); ties broken by lowest index.
/// instance_sample holds one chosen instance index per subclass.
int srp_head_scores(const CAStack& stack, int layer, int head,
                    const QueryGrid& probe, const SemanticGuidanceTree& sgt,
                    const std::vector<int>& instance_sample);

/// argmax_m of the head/instance sums within the layer; ties lowest index.
int srp_layer_scores(const CAStack& stack, int layer, const QueryGrid& probe,
                     const SemanticGuidanceTree& sgt,
                     const std::vector<int>& instance_sample);

/// One-hot accumulation: per probe, +1 in every head column and every layer
/// column. Instances are resampled per probe from the seeded stream.
void accumulate_weights(WeightMatrices& matrices,
                        const std::vector<QueryGrid>& probes,
                        const CAStack& stack, const SemanticGuidanceTree& sgt,
                        std::uint64_t sample_seed);

/// Installs the modulation hook: head (l,h) gain is
/// lambda * (layer count fraction for class_of(f*)) * (head count fraction
/// for f*); zero-gain heads are left untouched. token_index -1 selects the
/// subject token.
void modulate(CAStack& stack, const WeightMatrices& matrices,
              const SemanticGuidanceTree& sgt, const std::string& target_subclass,
              double lambda, const TokenSet& tokens, int token_index = -1,
              bool pre_softmax = false);

std::string head_weights_csv(const WeightMatrices& m, const SemanticGuidanceTree& sgt,
                             int heads_per_layer);
std::string layer_weights_csv(const WeightMatrices& m, const SemanticGuidanceTree& sgt);

}  // namespace tdattn
