#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tdattn/common.hpp"

namespace tdattn {

/// Joint distribution over (view bin, object evidence in {0,1}, image state).
struct JointTable {
    int num_views = 0;
    int num_states = 0;
    std::vector<double> p;  // index (v * 2 + y) * num_states + z

    double& at(int v, int y, int z) {
        return p[static_cast<std::size_t>(v * 2 + y) * num_states + z];
    }
    double at(int v, int y, int z) const {
        return p[static_cast<std::size_t>(v * 2 + y) * num_states + z];
    }
    double total() const;
};

struct DiscreteViewModel {
    std::vector<double> azimuths;  // bin centers, strictly increasing
    Eigen::VectorXd p_prior;       // p_D(v | y_obj)
    double epsilon = 0.0;
    std::optional<JointTable> joint_table;

    void validate() const;
    int num_views() const { return static_cast<int>(azimuths.size()); }
};

DiscreteViewModel make_uniform_model(int bins, double epsilon);

/// p(v|Y) = (1-eps) * delta_{v,v*} + eps * p_prior(v).
Eigen::VectorXd posterior_mixture(const DiscreteViewModel& model, int v_star);

/// R = eps * p_prior(v_prior) / ((1-eps) + eps * p_prior(v*)),
/// v_prior = argmax of the prior (ties lowest index).
double preference_ratio(const DiscreteViewModel& model, int v_star);

enum class Regime { TargetDominant, PriorDominant, Contaminated };
const char* regime_name(Regime r);

/// Thresholds calibrate "<<" and ">>": target if R <= lo, prior if R >= hi.
Regime classify_regime(double ratio, double epsilon, double lo = 0.1, double hi = 10.0);

/// C = p(v*|y_obj, z) / p(v*|z), both from the joint table.
double coupling_C(const JointTable& table, int v_star, int evidence_y, int z);

struct GradientProbePoint {
    double t = 0.0;
    double c = 0.0;
    double dlog_c = 0.0;
    bool divergent = false;  // C hit zero; derivative not reported
};

/// Finite-difference d log C along a parametrized family of evidence states.
std::vector<GradientProbePoint> logC_gradient_probe(
    const std::function<JointTable(double)>& path, int v_star, int evidence_y,
    int z, double t0, double t1, int steps, double h = 1e-4);

}  // namespace tdattn
