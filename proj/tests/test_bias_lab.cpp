#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "tdattn/bias_lab.hpp"

using namespace tdattn;

namespace {

DiscreteViewModel skew_model(double epsilon) {
    DiscreteViewModel m;
    m.azimuths = {0.0, 2.0, 4.0};
    m.p_prior = Eigen::Vector3d(0.5, 0.3, 0.2);
    m.epsilon = epsilon;
    return m;
}

JointTable independent_table(const Eigen::VectorXd& pv, const Eigen::Vector2d& py,
                             const Eigen::VectorXd& pz) {
    JointTable t;
    t.num_views = static_cast<int>(pv.size());
    t.num_states = static_cast<int>(pz.size());
    t.p.assign(static_cast<std::size_t>(t.num_views) * 2 * t.num_states, 0.0);
    for (int v = 0; v < t.num_views; ++v) {
        for (int y = 0; y < 2; ++y) {
            for (int z = 0; z < t.num_states; ++z) {
                t.at(v, y, z) = pv[v] * py[y] * pz[z];
            }
        }
    }
    return t;
}

// Straight-line reimplementation of the coupling from conditional definitions,
// organized differently from the library loop.
double naive_coupling(const JointTable& t, int v_star, int y, int z) {
    double joint_vyz = t.at(v_star, y, z);
    double p_yz = 0.0, p_z = 0.0;
    for (int v = 0; v < t.num_views; ++v) {
        p_yz += t.at(v, y, z);
        p_z += t.at(v, 0, z) + t.at(v, 1, z);
    }
    double p_vz = t.at(v_star, 0, z) + t.at(v_star, 1, z);
    return (joint_vyz / p_yz) / (p_vz / p_z);
}

}  // namespace

TEST_CASE("preference ratio hand oracle") {
    // prior (0.5, 0.3, 0.2), eps = 0.3, target view 2:
    // R = 0.3 * 0.5 / (0.7 + 0.3 * 0.2) = 0.15 / 0.76.
    DiscreteViewModel m = skew_model(0.3);
    CHECK(preference_ratio(m, 2) == doctest::Approx(0.15 / 0.76).epsilon(1e-15));

    SUBCASE("no contamination means an exact zero") {
        DiscreteViewModel clean = skew_model(0.0);
        CHECK(preference_ratio(clean, 1) == 0.0);
    }
    SUBCASE("full contamination of a uniform prior gives one") {
        DiscreteViewModel full = make_uniform_model(8, 1.0);
        CHECK(preference_ratio(full, 3) == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("prior argmax ties break toward the lowest index") {
        DiscreteViewModel m2;
        m2.azimuths = {0.0, 1.0};
        m2.p_prior = Eigen::Vector2d(0.5, 0.5);
        m2.epsilon = 0.4;
        // v_prior = 0, target 1: R = 0.4*0.5 / (0.6 + 0.4*0.5).
        CHECK(preference_ratio(m2, 1) == doctest::Approx(0.2 / 0.8).epsilon(1e-15));
    }
    SUBCASE("unknown target view throws") {
        CHECK_THROWS_AS(preference_ratio(m, 3), InvalidParameter);
    }
}

TEST_CASE("preference ratio grows monotonically with epsilon") {
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        DiscreteViewModel m;
        int bins = 3 + trial % 5;
        Eigen::VectorXd prior(bins);
        for (int i = 0; i < bins; ++i) {
            m.azimuths.push_back(i);
            prior[i] = u(rng);
        }
        m.p_prior = prior / prior.sum();
        int v_star = trial % bins;
        double prev = -1.0;
        for (double eps = 0.0; eps <= 1.0; eps += 0.05) {
            m.epsilon = std::min(eps, 1.0);
            double r = preference_ratio(m, v_star);
            CHECK(r > prev);
            prev = r;
        }
    }
}

TEST_CASE("posterior mixture") {
    DiscreteViewModel m = skew_model(0.4);
    Eigen::VectorXd post = posterior_mixture(m, 1);
    CHECK(post.sum() == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(post[1] == doctest::Approx(0.6 + 0.4 * 0.3).epsilon(1e-15));
    CHECK(post[0] == doctest::Approx(0.4 * 0.5).epsilon(1e-15));

    m.epsilon = 0.0;
    Eigen::VectorXd delta = posterior_mixture(m, 2);
    CHECK(delta[2] == 1.0);
    CHECK(delta[0] == 0.0);
    CHECK(delta[1] == 0.0);
}

TEST_CASE("regime classification thresholds") {
    CHECK(classify_regime(0.05, 0.1) == Regime::TargetDominant);
    CHECK(classify_regime(0.1, 0.1) == Regime::TargetDominant);   // boundary
    CHECK(classify_regime(0.11, 0.1) == Regime::Contaminated);
    CHECK(classify_regime(9.99, 0.9) == Regime::Contaminated);
    CHECK(classify_regime(10.0, 0.9) == Regime::PriorDominant);   // boundary
    CHECK(classify_regime(1e6, 1.0) == Regime::PriorDominant);
    CHECK_THROWS_AS(classify_regime(-0.1, 0.5), InvalidParameter);
    CHECK(std::string(regime_name(Regime::Contaminated)) == "contaminated");
}

TEST_CASE("coupling is one under independence") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (int trial = 0; trial < 5; ++trial) {
        int nv = 2 + trial;
        Eigen::VectorXd pv(nv), pz(3);
        for (int i = 0; i < nv; ++i) pv[i] = u(rng);
        for (int i = 0; i < 3; ++i) pz[i] = u(rng);
        Eigen::Vector2d py(u(rng), u(rng));
        pv /= pv.sum();
        py /= py.sum();
        pz /= pz.sum();
        JointTable t = independent_table(pv, py, pz);
        for (int v = 0; v < nv; ++v) {
            for (int y = 0; y < 2; ++y) {
                for (int z = 0; z < 3; ++z) {
                    CHECK(coupling_C(t, v, y, z) == doctest::Approx(1.0).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("coupling matches an independent marginalization") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    JointTable t;
    t.num_views = 4;
    t.num_states = 2;
    t.p.resize(4 * 2 * 2);
    double total = 0.0;
    for (auto& x : t.p) {
        x = u(rng);
        total += x;
    }
    for (auto& x : t.p) x /= total;
    for (int v = 0; v < 4; ++v) {
        for (int y = 0; y < 2; ++y) {
            for (int z = 0; z < 2; ++z) {
                CHECK(coupling_C(t, v, y, z) ==
                      doctest::Approx(naive_coupling(t, v, y, z)).epsilon(1e-12));
            }
        }
    }

    SUBCASE("degenerate conditioning is reported, not silently divided") {
        JointTable zeroed = t;
        for (int v = 0; v < 4; ++v) zeroed.at(v, 1, 0) = 0.0;
        CHECK_THROWS_AS(coupling_C(zeroed, 0, 1, 0), InvalidParameter);
        CHECK_THROWS_AS(coupling_C(t, 9, 0, 0), InvalidParameter);
        CHECK_THROWS_AS(coupling_C(t, 0, 2, 0), InvalidParameter);
    }
}

TEST_CASE("log-coupling gradient probe on an exponential family") {
    // Constructed so that C(t) = exp(-t) exactly: p(v0) = 1/2 marginally and
    // p(v0 | y=1) = exp(-t) / 2.
    auto path = [](double t) {
        JointTable tab;
        tab.num_views = 2;
        tab.num_states = 1;
        tab.p.resize(4);
        double e = std::exp(-t);
        tab.at(0, 1, 0) = 0.25 * e;
        tab.at(1, 1, 0) = 0.5 - 0.25 * e;
        tab.at(0, 0, 0) = 0.5 - 0.25 * e;
        tab.at(1, 0, 0) = 0.25 * e;
        return tab;
    };
    auto pts = logC_gradient_probe(path, 0, 1, 0, 0.1, 1.0, 10);
    REQUIRE(pts.size() == 10);
    for (const auto& pt : pts) {
        CHECK_FALSE(pt.divergent);
        CHECK(pt.c == doctest::Approx(std::exp(-pt.t)).epsilon(1e-12));
        CHECK(pt.dlog_c == doctest::Approx(-1.0).epsilon(1e-6));
        CHECK(pt.dlog_c < 0.0);
    }

    SUBCASE("unsupported conditioning flags divergence") {
        auto dead = [](double) {
            JointTable tab;
            tab.num_views = 2;
            tab.num_states = 1;
            tab.p = {0.5, 0.0, 0.5, 0.0};  // y=1 never occurs
            return tab;
        };
        auto bad = logC_gradient_probe(dead, 0, 1, 0, 0.0, 1.0, 3);
        for (const auto& pt : bad) CHECK(pt.divergent);
    }
    SUBCASE("argument validation") {
        CHECK_THROWS_AS(logC_gradient_probe(path, 0, 1, 0, 0.0, 1.0, 1),
                        InvalidParameter);
        CHECK_THROWS_AS(logC_gradient_probe(path, 0, 1, 0, 0.0, 1.0, 5, 1.0),
                        InvalidParameter);
    }
}

TEST_CASE("model validation") {
    DiscreteViewModel m = skew_model(0.5);
    CHECK_NOTHROW(m.validate());

    DiscreteViewModel bad = m;
    bad.azimuths = {0.0, 0.0, 1.0};
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);

    bad = m;
    bad.p_prior = Eigen::Vector2d(0.5, 0.5);
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);

    bad = m;
    bad.p_prior = Eigen::Vector3d(0.9, 0.3, -0.2);
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);

    bad = m;
    bad.p_prior = Eigen::Vector3d(0.5, 0.3, 0.3);  // sums to 1.1
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);

    bad = m;
    bad.epsilon = 1.5;
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);

    bad = m;
    bad.joint_table = JointTable{};
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);

    bad = m;
    JointTable t;
    t.num_views = 3;
    t.num_states = 1;
    t.p.assign(6, 0.2);  // sums to 1.2
    bad.joint_table = t;
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);

    DiscreteViewModel uni = make_uniform_model(6, 0.2);
    CHECK_NOTHROW(uni.validate());
    CHECK(uni.num_views() == 6);
    CHECK(uni.p_prior.maxCoeff() == doctest::Approx(1.0 / 6));
}
