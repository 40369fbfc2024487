#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "tdattn/splat_renderer.hpp"

using namespace tdattn;

namespace {

Camera front_camera() {
    Camera cam;
    cam.eye = Vec3(0, 0, -4);
    cam.look_at = Vec3::Zero();
    cam.up = Vec3(0, 1, 0);
    cam.focal = 40.0;
    cam.width = 32;
    cam.height = 32;
    return cam;
}

GaussianCloud random_cloud(std::mt19937_64& rng, int n) {
    std::uniform_real_distribution<double> pos(-0.6, 0.6);
    std::uniform_real_distribution<double> sc(0.1, 0.3);
    std::uniform_real_distribution<double> op(0.2, 0.8);
    std::uniform_real_distribution<double> col(0.0, 1.0);
    std::uniform_real_distribution<double> at(0.0, 2.0);
    std::normal_distribution<double> nrm;
    GaussianCloud cloud(n);
    for (auto& g : cloud) {
        g.position = Vec3(pos(rng), pos(rng), pos(rng));
        Eigen::Vector4d q(nrm(rng), nrm(rng), nrm(rng), nrm(rng));
        q.normalize();
        g.rotation = Quat(q[0], q[1], q[2], q[3]);
        g.scale = Vec3(sc(rng), sc(rng), sc(rng));
        g.opacity = op(rng);
        g.color = Vec3(col(rng), col(rng), col(rng));
        g.attn_weight = at(rng);
    }
    return cloud;
}

}  // namespace

TEST_CASE("project") {
    Camera cam = front_camera();
    SUBCASE("behind the near plane is culled, not an error") {
        Gaussian3D g;
        g.position = Vec3(0, 0, -8);  // behind the eye
        Projected p = project(g, cam);
        CHECK_FALSE(p.visible);
    }
    SUBCASE("a centered Gaussian lands on the principal point") {
        Gaussian3D g;
        g.position = Vec3::Zero();
        Projected p = project(g, cam);
        REQUIRE(p.visible);
        CHECK(p.mean2d.x() == doctest::Approx(15.5).epsilon(1e-12));
        CHECK(p.mean2d.y() == doctest::Approx(15.5).epsilon(1e-12));
        CHECK(p.depth == doctest::Approx(4.0));
    }
    SUBCASE("screen covariance carries the low-pass regularizer") {
        Gaussian3D g;
        g.scale = Vec3(0.01, 0.01, 0.01);  // nearly a point
        Projected p = project(g, cam);
        REQUIRE(p.visible);
        CHECK(p.cov2d(0, 0) >= 0.3);
        CHECK(p.cov2d(1, 1) >= 0.3);
        CHECK(p.cov2d(0, 0) == doctest::Approx(0.3).epsilon(0.1));
    }
}

TEST_CASE("two-splat compositing matches the hand oracle") {
    // Both Gaussians project exactly onto pixel (16, 16): the front one at
    // depth 4 with alpha 0.5, the back one at depth 5 with alpha 0.25, so the
    // composite weights are 0.5 and 0.25 * (1 - 0.5) = 0.125.
    Camera cam = front_camera();
    GaussianCloud cloud(2);
    cloud[0].position = Vec3(-0.05, -0.05, 0.0);
    cloud[0].opacity = 0.5;
    cloud[0].color = Vec3(1, 0, 0);
    cloud[0].attn_weight = 2.0;
    cloud[1].position = Vec3(-0.0625, -0.0625, 1.0);
    cloud[1].opacity = 0.25;
    cloud[1].color = Vec3(0, 0, 1);
    cloud[1].attn_weight = 4.0;
    for (auto& g : cloud) g.scale = Vec3(0.2, 0.2, 0.2);

    RenderOutput out = render(cloud, cam, RenderChannel::All);
    const int x = 16, y = 16;
    CHECK(out.mass(y, x) == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(out.color.r(y, x) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.color.g(y, x) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(out.color.b(y, x) == doctest::Approx(0.125).epsilon(1e-12));
    // Visibility-normalized channels.
    CHECK(out.attn(y, x) == doctest::Approx((0.5 * 2 + 0.125 * 4) / 0.625).epsilon(1e-12));
    CHECK(out.depth(y, x) == doctest::Approx((0.5 * 4 + 0.125 * 5) / 0.625).epsilon(1e-12));

    const auto& cl = out.contrib[static_cast<std::size_t>(y) * cam.width + x];
    REQUIRE(cl.size() == 2);
    CHECK(cl[0].first == 0);
    CHECK(cl[0].second == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(cl[1].first == 1);
    CHECK(cl[1].second == doctest::Approx(0.125).epsilon(1e-12));

    SUBCASE("background shows through uncovered pixels") {
        RenderSettings rs;
        rs.background = Vec3(0.2, 0.4, 0.6);
        RenderOutput bg = render(cloud, cam, RenderChannel::Color, rs);
        CHECK(bg.color.r(0, 0) == doctest::Approx(0.2));
        CHECK(bg.color.g(0, 0) == doctest::Approx(0.4));
        CHECK(bg.color.b(0, 0) == doctest::Approx(0.6));
        // Covered pixel blends with final transmittance.
        CHECK(bg.color.g(y, x) == doctest::Approx(0.375 * 0.4).epsilon(1e-12));
    }
}

TEST_CASE("alpha is clamped at the compositing bound") {
    Camera cam = front_camera();
    GaussianCloud cloud(1);
    cloud[0].position = Vec3(-0.05, -0.05, 0.0);  // exactly on pixel (16,16)
    cloud[0].opacity = 1.0;
    cloud[0].scale = Vec3(0.3, 0.3, 0.3);
    RenderOutput out = render(cloud, cam, RenderChannel::All);
    CHECK(out.mass(16, 16) == doctest::Approx(0.99).epsilon(1e-12));
}

TEST_CASE("equal depths fall back to index order") {
    Camera cam = front_camera();
    GaussianCloud cloud(2);
    for (auto& g : cloud) {
        g.position = Vec3(-0.05, -0.05, 0.0);
        g.scale = Vec3(0.2, 0.2, 0.2);
    }
    cloud[0].opacity = 0.5;
    cloud[1].opacity = 0.5;
    RenderOutput out = render(cloud, cam, RenderChannel::All);
    const auto& cl = out.contrib[16 * 32 + 16];
    REQUIRE(cl.size() == 2);
    CHECK(cl[0].first == 0);
    CHECK(cl[0].second == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(cl[1].first == 1);
    CHECK(cl[1].second == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central finite differences") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 3; ++trial) {
        GaussianCloud cloud = random_cloud(rng, 6);
        GaussianCloud target_cloud = random_cloud(rng, 6);
        Camera cam = front_camera();
        RenderOutput target = render(target_cloud, cam, RenderChannel::All);

        SUBCASE(("color loss, trial " + std::to_string(trial)).c_str()) {
            FiniteDiffReport rep =
                finite_diff_check(cloud, cam, l2_color_loss(target.color), 1e-5);
            for (const auto& g : rep.groups) {
                INFO(g.name, " worst gaussian ", g.worst_gaussian);
                CHECK(g.max_rel_err < 1e-4);
            }
        }
        SUBCASE(("attn loss, trial " + std::to_string(trial)).c_str()) {
            FiniteDiffReport rep =
                finite_diff_check(cloud, cam, l2_attn_loss(target.attn), 1e-5);
            CHECK(rep.worst() < 1e-4);
        }
    }
}

TEST_CASE("row-parallel rendering is deterministic") {
    std::mt19937_64 rng(11);
    GaussianCloud cloud = random_cloud(rng, 12);
    Camera cam = front_camera();
    RenderSettings rs1, rs4;
    rs4.threads = 4;
    RenderOutput a = render(cloud, cam, RenderChannel::All, rs1);
    RenderOutput b = render(cloud, cam, RenderChannel::All, rs4);
    CHECK((a.color.r - b.color.r).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.attn - b.attn).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.depth - b.depth).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.mass - b.mass).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("invalid inputs are rejected") {
    Camera cam = front_camera();
    GaussianCloud cloud(1);
    cloud[0].opacity = 2.0;
    CHECK_THROWS_AS(render(cloud, cam), InvalidParameter);

    cloud[0].opacity = 0.5;
    cam.width = 2;
    CHECK_THROWS_AS(render(cloud, cam), InvalidParameter);

    CHECK_THROWS_AS(
        finite_diff_check(cloud, front_camera(), l2_attn_loss(Grid::Zero(32, 32)), 1.0),
        InvalidParameter);
}

TEST_CASE("loss stands at zero on its own render") {
    std::mt19937_64 rng(5);
    GaussianCloud cloud = random_cloud(rng, 5);
    Camera cam = front_camera();
    RenderOutput out = render(cloud, cam, RenderChannel::All);
    CHECK(l2_color_loss(out.color).value(out) == doctest::Approx(0.0));
    CHECK(l2_attn_loss(out.attn).value(out) == doctest::Approx(0.0));
}
