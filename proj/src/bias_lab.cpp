#include "tdattn/bias_lab.hpp"

#include <cmath>
#include <numeric>

namespace tdattn {

double JointTable::total() const {
    return std::accumulate(p.begin(), p.end(), 0.0);
}

void DiscreteViewModel::validate() const {
    if (azimuths.empty()) throw InvalidParameter("view model: no azimuth bins");
    for (std::size_t i = 1; i < azimuths.size(); ++i) {
        if (azimuths[i] <= azimuths[i - 1]) {
            throw InvalidParameter("view model: azimuths must be strictly increasing");
        }
    }
    if (p_prior.size() != static_cast<Eigen::Index>(azimuths.size())) {
        throw InvalidParameter("view model: prior size mismatch");
    }
    if (p_prior.minCoeff() < 0.0) throw InvalidParameter("view model: negative prior mass");
    if (std::abs(p_prior.sum() - 1.0) > 1e-12) {
        throw InvalidParameter("view model: prior must sum to 1");
    }
    if (epsilon < 0.0 || epsilon > 1.0) {
        throw InvalidParameter("view model: epsilon must be in [0,1]");
    }
    if (joint_table) {
        const JointTable& t = *joint_table;
        if (t.num_views != num_views() || t.num_states < 1 ||
            t.p.size() != static_cast<std::size_t>(t.num_views) * 2 * t.num_states) {
            throw InvalidParameter("view model: joint table shape mismatch");
        }
        for (double v : t.p) {
            if (v < 0.0) throw InvalidParameter("view model: negative joint mass");
        }
        if (std::abs(t.total() - 1.0) > 1e-12) {
            throw InvalidParameter("view model: joint table must sum to 1");
        }
    }
}

DiscreteViewModel make_uniform_model(int bins, double epsilon) {
    DiscreteViewModel m;
    for (int i = 0; i < bins; ++i) m.azimuths.push_back(2.0 * M_PI * i / bins);
    m.p_prior = Eigen::VectorXd::Constant(bins, 1.0 / bins);
    m.epsilon = epsilon;
    return m;
}

Eigen::VectorXd posterior_mixture(const DiscreteViewModel& model, int v_star) {
    model.validate();
    if (v_star < 0 || v_star >= model.num_views()) {
        throw InvalidParameter("posterior_mixture: unknown v_star");
    }
    Eigen::VectorXd p = model.epsilon * model.p_prior;
    p[v_star] += 1.0 - model.epsilon;
    return p;
}

double preference_ratio(const DiscreteViewModel& model, int v_star) {
    model.validate();
    if (v_star < 0 || v_star >= model.num_views()) {
        throw InvalidParameter("preference_ratio: unknown v_star");
    }
    int v_prior = 0;
    model.p_prior.maxCoeff(&v_prior);  // Eigen returns the first maximum
    double num = model.epsilon * model.p_prior[v_prior];
    double den = (1.0 - model.epsilon) + model.epsilon * model.p_prior[v_star];
    return num / den;
}

const char* regime_name(Regime r) {
    switch (r) {
        case Regime::TargetDominant: return "target_dominant";
        case Regime::PriorDominant: return "prior_dominant";
        case Regime::Contaminated: return "contaminated";
    }
    return "?";
}

Regime classify_regime(double ratio, double, double lo, double hi) {
    if (ratio < 0.0) throw InvalidParameter("classify_regime: negative ratio");
    if (ratio <= lo) return Regime::TargetDominant;
    if (ratio >= hi) return Regime::PriorDominant;
    return Regime::Contaminated;
}

double coupling_C(const JointTable& table, int v_star, int evidence_y, int z) {
    if (v_star < 0 || v_star >= table.num_views || z < 0 || z >= table.num_states ||
        (evidence_y != 0 && evidence_y != 1)) {
        throw InvalidParameter("coupling_C: index out of range");
    }
    // p(v*|y,z) = p(v*,y,z) / sum_v p(v,y,z)
    double yz = 0.0;
    for (int v = 0; v < table.num_views; ++v) yz += table.at(v, evidence_y, z);
    // p(v*|z) = sum_y p(v*,y,z) / sum_{v,y} p(v,y,z)
    double zmass = 0.0, vz = 0.0;
    for (int v = 0; v < table.num_views; ++v) {
        for (int y = 0; y < 2; ++y) {
            zmass += table.at(v, y, z);
            if (v == v_star) vz += table.at(v, y, z);
        }
    }
    if (yz <= 0.0 || zmass <= 0.0 || vz <= 0.0) {
        throw InvalidParameter("coupling_C: unsupported conditioning");
    }
    double cond_y = table.at(v_star, evidence_y, z) / yz;
    double cond = vz / zmass;
    return cond_y / cond;
}

std::vector<GradientProbePoint> logC_gradient_probe(
    const std::function<JointTable(double)>& path, int v_star, int evidence_y,
    int z, double t0, double t1, int steps, double h) {
    if (steps < 2) throw InvalidParameter("logC_gradient_probe: need >= 2 steps");
    if (!(h > 0.0 && h <= 1e-2)) throw InvalidParameter("logC_gradient_probe: bad h");

    std::vector<GradientProbePoint> out;
    out.reserve(steps);
    for (int i = 0; i < steps; ++i) {
        double t = t0 + (t1 - t0) * i / (steps - 1);
        GradientProbePoint pt;
        pt.t = t;
        double c = 0.0;
        try {
            c = coupling_C(path(t), v_star, evidence_y, z);
        } catch (const InvalidParameter&) {
            pt.divergent = true;
            out.push_back(pt);
            continue;
        }
        pt.c = c;
        if (c <= 0.0) {
            pt.divergent = true;
            out.push_back(pt);
            continue;
        }
        try {
            double cp = coupling_C(path(t + h), v_star, evidence_y, z);
            double cm = coupling_C(path(t - h), v_star, evidence_y, z);
            if (cp <= 0.0 || cm <= 0.0) {
                pt.divergent = true;
            } else {
                pt.dlog_c = (std::log(cp) - std::log(cm)) / (2.0 * h);
            }
        } catch (const InvalidParameter&) {
            pt.divergent = true;
        }
        out.push_back(pt);
    }
    return out;
}

}  // namespace tdattn
