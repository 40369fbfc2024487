#include "tdattn/splat_renderer.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace tdattn {

namespace {

// Jacobian of the pinhole projection at camera-space point t.
Eigen::Matrix<double, 2, 3> proj_jacobian(const Vec3& t, double focal) {
    Eigen::Matrix<double, 2, 3> j;
    double iz = 1.0 / t.z();
    double iz2 = iz * iz;
    j << focal * iz, 0.0, -focal * t.x() * iz2,
         0.0, focal * iz, -focal * t.y() * iz2;
    return j;
}

double max_eigenvalue_2x2(const Mat2& c) {
    double mid = 0.5 * (c(0, 0) + c(1, 1));
    double det = c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0);
    return mid + std::sqrt(std::max(mid * mid - det, 0.0));
}

struct PixelHit {
    int slot;       // index into RenderOutput::splats
    double alpha;   // clamped alpha
    double gval;    // Gaussian falloff G
    double weight;  // alpha * T
    double transmittance;
    bool clamped;
};

// Front-to-back walk over the sorted splats covering pixel (x, y).
void composite_pixel(const std::vector<SplatCache>& splats,
                     const GaussianCloud& cloud, int x, int y,
                     const RenderSettings& rs, std::vector<PixelHit>& hits) {
    hits.clear();
    double t = 1.0;
    for (std::size_t s = 0; s < splats.size(); ++s) {
        const SplatCache& sp = splats[s];
        if (x < sp.x0 || x > sp.x1 || y < sp.y0 || y > sp.y1) continue;
        Vec2 d(x - sp.mean2d.x(), y - sp.mean2d.y());
        double g = std::exp(-0.5 * d.dot(sp.inv_cov * d));
        double alpha_raw = cloud[sp.index].opacity * g;
        bool clamped = alpha_raw > rs.alpha_clamp;
        double alpha = clamped ? rs.alpha_clamp : alpha_raw;
        if (alpha < 1e-12) continue;
        hits.push_back({static_cast<int>(s), alpha, g, alpha * t, t, clamped});
        t *= (1.0 - alpha);
    }
}

}  // namespace

Projected project(const Gaussian3D& g, const Camera& cam, const RenderSettings& rs) {
    Projected out;
    Mat3 w = cam.world_to_cam();
    Vec3 t = w * (g.position - cam.eye);
    if (t.z() <= rs.near_plane) return out;  // culled, not an error

    Vec2 pp = cam.principal_point();
    out.mean2d = Vec2(cam.focal * t.x() / t.z() + pp.x(),
                      cam.focal * t.y() / t.z() + pp.y());
    out.depth = t.z();

    Mat3 sigma = covariance_from_rs(g.rotation, g.scale);
    Mat3 cov_cam = w * sigma * w.transpose();
    Eigen::Matrix<double, 2, 3> j = proj_jacobian(t, cam.focal);
    out.cov2d = j * cov_cam * j.transpose() + rs.cov2d_reg * Mat2::Identity();
    out.visible = true;
    return out;
}

RenderOutput render(const GaussianCloud& cloud, const Camera& cam,
                    RenderChannel channel, const RenderSettings& rs) {
    const int h = cam.height;
    const int w = cam.width;
    if (h < 4 || w < 4) throw InvalidParameter("render: resolution must be >= 4x4");

    RenderOutput out;
    out.color = Image(h, w);
    out.color.r.setConstant(rs.background.x());
    out.color.g.setConstant(rs.background.y());
    out.color.b.setConstant(rs.background.z());
    out.depth = Grid::Zero(h, w);
    out.attn = Grid::Zero(h, w);
    out.mass = Grid::Zero(h, w);
    out.contrib.assign(static_cast<std::size_t>(h) * w, {});

    Mat3 wc = cam.world_to_cam();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        validate_gaussian(cloud[i], i);
        Projected p = project(cloud[i], cam, rs);
        if (!p.visible) continue;
        SplatCache sc;
        sc.index = static_cast<int>(i);
        sc.mean2d = p.mean2d;
        sc.inv_cov = p.cov2d.inverse();
        sc.depth = p.depth;
        sc.t_cam = wc * (cloud[i].position - cam.eye);
        sc.cov_cam = wc * covariance_from_rs(cloud[i].rotation, cloud[i].scale) *
                     wc.transpose();
        double radius = rs.sigma_cull * std::sqrt(max_eigenvalue_2x2(p.cov2d));
        sc.x0 = std::max(0.0, std::floor(p.mean2d.x() - radius));
        sc.x1 = std::min(static_cast<double>(w - 1), std::ceil(p.mean2d.x() + radius));
        sc.y0 = std::max(0.0, std::floor(p.mean2d.y() - radius));
        sc.y1 = std::min(static_cast<double>(h - 1), std::ceil(p.mean2d.y() + radius));
        if (sc.x0 > sc.x1 || sc.y0 > sc.y1) continue;
        out.splats.push_back(sc);
    }

    std::sort(out.splats.begin(), out.splats.end(),
              [](const SplatCache& a, const SplatCache& b) {
                  if (a.depth != b.depth) return a.depth < b.depth;
                  return a.index < b.index;
              });

    const bool want_color = channel == RenderChannel::Color || channel == RenderChannel::All;
    const bool want_attn = channel == RenderChannel::Attn || channel == RenderChannel::All;
    const bool want_depth = channel == RenderChannel::Depth || channel == RenderChannel::All;

    auto render_rows = [&](int y_begin, int y_end) {
        std::vector<PixelHit> hits;
        for (int y = y_begin; y < y_end; ++y) {
            for (int x = 0; x < w; ++x) {
                composite_pixel(out.splats, cloud, x, y, rs, hits);
                if (hits.empty()) continue;
                auto& cl = out.contrib[static_cast<std::size_t>(y) * w + x];
                cl.reserve(hits.size());
                double mass = 0.0, attn_sum = 0.0, depth_sum = 0.0;
                Vec3 col = Vec3::Zero();
                for (const PixelHit& hit : hits) {
                    const SplatCache& sp = out.splats[hit.slot];
                    const Gaussian3D& g = cloud[sp.index];
                    cl.emplace_back(sp.index, hit.weight);
                    mass += hit.weight;
                    if (want_color) col += hit.weight * g.color;
                    if (want_attn) attn_sum += hit.weight * g.attn_weight;
                    if (want_depth) depth_sum += hit.weight * sp.depth;
                }
                out.mass(y, x) = mass;
                double denom = std::max(mass, rs.eps_vis);
                if (want_color) {
                    double t_final = 1.0 - mass;
                    Vec3 c = col + t_final * rs.background;
                    out.color.r(y, x) = c.x();
                    out.color.g(y, x) = c.y();
                    out.color.b(y, x) = c.z();
                }
                if (want_attn) out.attn(y, x) = attn_sum / denom;
                if (want_depth) out.depth(y, x) = depth_sum / denom;
            }
        }
    };

    int threads = std::max(1, rs.threads);
    if (threads == 1 || h < 2 * threads) {
        render_rows(0, h);
    } else {
        std::vector<std::thread> pool;
        int chunk = (h + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            int y0 = t * chunk;
            int y1 = std::min(h, y0 + chunk);
            if (y0 >= y1) break;
            pool.emplace_back(render_rows, y0, y1);
        }
        for (auto& th : pool) th.join();
    }
    return out;
}

ParamGrads render_backward(const GaussianCloud& cloud, const Camera& cam,
                           const RenderOutput& fwd,
                           const Image* grad_color, const Grid* grad_attn,
                           const RenderSettings& rs) {
    const int h = fwd.height();
    const int w = fwd.width();
    if (grad_color && (grad_color->height() != h || grad_color->width() != w)) {
        throw InvalidParameter("render_backward: grad_color shape mismatch");
    }
    if (grad_attn && (grad_attn->rows() != h || grad_attn->cols() != w)) {
        throw InvalidParameter("render_backward: grad_attn shape mismatch");
    }

    ParamGrads grads(cloud.size());
    std::vector<Vec2> d_mean(fwd.splats.size(), Vec2::Zero());
    std::vector<Mat2> d_cov(fwd.splats.size(), Mat2::Zero());

    std::vector<PixelHit> hits;
    std::vector<double> dLdw;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            composite_pixel(fwd.splats, cloud, x, y, rs, hits);
            if (hits.empty()) continue;

            Vec3 gc = Vec3::Zero();
            if (grad_color) {
                gc = Vec3(grad_color->r(y, x), grad_color->g(y, x), grad_color->b(y, x));
            }
            double ga = grad_attn ? (*grad_attn)(y, x) : 0.0;

            double mass = 0.0, attn_sum = 0.0;
            for (const PixelHit& hit : hits) {
                mass += hit.weight;
                attn_sum += hit.weight * cloud[fwd.splats[hit.slot].index].attn_weight;
            }
            double denom = std::max(mass, rs.eps_vis);
            double attn_val = attn_sum / denom;

            dLdw.assign(hits.size(), 0.0);
            for (std::size_t k = 0; k < hits.size(); ++k) {
                const SplatCache& sp = fwd.splats[hits[k].slot];
                const Gaussian3D& g = cloud[sp.index];
                double d = gc.dot(g.color);
                if (ga != 0.0) {
                    // attn = attn_sum / max(mass, eps)
                    if (mass > rs.eps_vis) {
                        d += ga * (g.attn_weight - attn_val) / mass;
                    } else {
                        d += ga * g.attn_weight / rs.eps_vis;
                    }
                }
                dLdw[k] = d;
                grads.color[sp.index] += gc * hits[k].weight;
                grads.attn_weight[sp.index] += ga * hits[k].weight / denom;
            }

            // dL/dalpha_k = dLdw_k * T_k - sum_{i>k} dLdw_i * w_i / (1 - alpha_k)
            double suffix = 0.0;
            for (int k = static_cast<int>(hits.size()) - 1; k >= 0; --k) {
                const PixelHit& hit = hits[k];
                double d_alpha = dLdw[k] * hit.transmittance;
                if (hit.alpha < 1.0) d_alpha -= suffix / (1.0 - hit.alpha);
                suffix += dLdw[k] * hit.weight;
                if (hit.clamped) continue;  // flat region of the clamp

                const SplatCache& sp = fwd.splats[hit.slot];
                const Gaussian3D& g = cloud[sp.index];
                grads.opacity[sp.index] += d_alpha * hit.gval;
                double d_g = d_alpha * g.opacity;
                Vec2 diff(x - sp.mean2d.x(), y - sp.mean2d.y());
                Vec2 md = sp.inv_cov * diff;
                d_mean[hit.slot] += d_g * hit.gval * md;
                d_cov[hit.slot] += d_g * 0.5 * hit.gval * (md * md.transpose());
            }
        }
    }

    // Chain mean2d / cov2d gradients through the projection to world position.
    Mat3 wc = cam.world_to_cam();
    for (std::size_t s = 0; s < fwd.splats.size(); ++s) {
        const SplatCache& sp = fwd.splats[s];
        if (d_mean[s].isZero(0.0) && d_cov[s].isZero(0.0)) continue;
        const Vec3& t = sp.t_cam;
        double f = cam.focal;
        double iz2 = 1.0 / (t.z() * t.z());
        double iz3 = iz2 / t.z();
        Eigen::Matrix<double, 2, 3> j = proj_jacobian(t, f);

        Eigen::Matrix<double, 2, 3> dj[3];
        dj[0].setZero();
        dj[0](0, 2) = -f * iz2;
        dj[1].setZero();
        dj[1](1, 2) = -f * iz2;
        dj[2].setZero();
        dj[2](0, 0) = -f * iz2;
        dj[2](1, 1) = -f * iz2;
        dj[2](0, 2) = 2.0 * f * t.x() * iz3;
        dj[2](1, 2) = 2.0 * f * t.y() * iz3;

        Vec3 dt = j.transpose() * d_mean[s];
        for (int i = 0; i < 3; ++i) {
            Mat2 half = dj[i] * sp.cov_cam * j.transpose();
            Mat2 dcdt = half + half.transpose();
            dt[i] += (d_cov[s].cwiseProduct(dcdt)).sum();
        }
        grads.position[sp.index] += wc.transpose() * dt;
    }
    return grads;
}

RenderLoss l2_color_loss(const Image& target) {
    RenderLoss loss;
    loss.value = [target](const RenderOutput& out) {
        double n = target.r.size();
        return ((out.color.r - target.r).squaredNorm() +
                (out.color.g - target.g).squaredNorm() +
                (out.color.b - target.b).squaredNorm()) / n;
    };
    loss.grad = [target](const RenderOutput& out, Image& gcolor, Grid& gattn) {
        double n = target.r.size();
        gcolor = Image(out.height(), out.width());
        gcolor.r = 2.0 * (out.color.r - target.r) / n;
        gcolor.g = 2.0 * (out.color.g - target.g) / n;
        gcolor.b = 2.0 * (out.color.b - target.b) / n;
        gattn = Grid::Zero(out.height(), out.width());
    };
    return loss;
}

RenderLoss l2_attn_loss(const Grid& target) {
    RenderLoss loss;
    loss.value = [target](const RenderOutput& out) {
        return (out.attn - target).squaredNorm() / target.size();
    };
    loss.grad = [target](const RenderOutput& out, Image& gcolor, Grid& gattn) {
        gcolor = Image(out.height(), out.width());
        gattn = 2.0 * (out.attn - target) / target.size();
    };
    return loss;
}

double FiniteDiffReport::worst() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.max_rel_err);
    return m;
}

FiniteDiffReport finite_diff_check(const GaussianCloud& cloud, const Camera& cam,
                                   const RenderLoss& loss, double h,
                                   const RenderSettings& rs) {
    if (!(h > 0.0 && h <= 1e-2)) {
        throw InvalidParameter("finite_diff_check: h must be in (0, 1e-2]");
    }

    RenderOutput fwd = render(cloud, cam, RenderChannel::All, rs);
    Image gcolor;
    Grid gattn;
    loss.grad(fwd, gcolor, gattn);
    ParamGrads analytic = render_backward(cloud, cam, fwd, &gcolor, &gattn, rs);

    auto eval = [&](const GaussianCloud& c) {
        return loss.value(render(c, cam, RenderChannel::All, rs));
    };
    auto rel_err = [](double a, double fd) {
        double diff = std::abs(a - fd);
        if (diff <= 1e-8) return 0.0;
        return diff / std::max(std::abs(a), std::abs(fd));
    };

    FiniteDiffReport report;
    report.groups.resize(4);
    report.groups[0].name = "position";
    report.groups[1].name = "opacity";
    report.groups[2].name = "color";
    report.groups[3].name = "attn_weight";

    auto record = [&](int group, int gi, int coord, double a, double fd) {
        double e = rel_err(a, fd);
        if (e > report.groups[group].max_rel_err) {
            report.groups[group].max_rel_err = e;
            report.groups[group].worst_gaussian = gi;
            report.groups[group].worst_coord = coord;
        }
    };

    GaussianCloud work = cloud;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            work[i].position[c] = cloud[i].position[c] + h;
            double lp = eval(work);
            work[i].position[c] = cloud[i].position[c] - h;
            double lm = eval(work);
            work[i].position[c] = cloud[i].position[c];
            record(0, static_cast<int>(i), c, analytic.position[i][c], (lp - lm) / (2 * h));
        }
        {
            work[i].opacity = cloud[i].opacity + h;
            double lp = eval(work);
            work[i].opacity = cloud[i].opacity - h;
            double lm = eval(work);
            work[i].opacity = cloud[i].opacity;
            record(1, static_cast<int>(i), 0, analytic.opacity[i], (lp - lm) / (2 * h));
        }
        for (int c = 0; c < 3; ++c) {
            work[i].color[c] = cloud[i].color[c] + h;
            double lp = eval(work);
            work[i].color[c] = cloud[i].color[c] - h;
            double lm = eval(work);
            work[i].color[c] = cloud[i].color[c];
            record(2, static_cast<int>(i), c, analytic.color[i][c], (lp - lm) / (2 * h));
        }
        {
            work[i].attn_weight = cloud[i].attn_weight + h;
            double lp = eval(work);
            work[i].attn_weight = std::max(0.0, cloud[i].attn_weight - h);
            double lm = eval(work);
            double step = cloud[i].attn_weight + h - work[i].attn_weight;
            work[i].attn_weight = cloud[i].attn_weight;
            record(3, static_cast<int>(i), 0, analytic.attn_weight[i], (lp - lm) / step);
        }
    }
    return report;
}

}  // namespace tdattn
