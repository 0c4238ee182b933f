#pragma once

#include "statfem/filters.hpp"
#include "statfem/linalg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace statfem {

/// Zero-truncated Gaussian priors on rho and sigma.
struct HyperPrior {
    double rho_location = 1.0;
    double rho_scale = 1.0;
    double sigma_location = 0.0;
    double sigma_scale = 1.0;

    void validate() const {
        if (!(rho_scale > 0.0) || !(sigma_scale > 0.0)) throw std::invalid_argument("HyperPrior: scales must be positive");
    }
};

/// log density of N(location, scale^2) truncated to (0, inf); -inf for x <= 0.
inline double log_truncated_normal(double x, double location, double scale) {
    if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
    const double z = (x - location) / scale;
    const double mass = 0.5 * std::erfc(-location / (scale * std::numbers::sqrt2));  // P(X > 0)
    return -0.5 * z * z - std::log(scale) - 0.5 * std::log(2.0 * std::numbers::pi) - std::log(mass);
}

struct MapEstimate {
    double rho = 0.0;
    double sigma = 0.0;
    double objective = 0.0;  // log marginal + log priors at the estimate
    int iterations = 0;
    bool converged = false;
};

/// Gaussian log density of y under N(H m, (HL)(HL)ᵀ + sigma^2 I), evaluated
/// with the Woodbury identity and the matrix determinant lemma.
inline double log_marginal(const Vector& y, const Vector& pred_mean, const Matrix& widened, const SparseMatrix& H,
                           double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("log_marginal: sigma must be positive");
    if (H.rows() != y.size() || H.cols() != pred_mean.size() || widened.rows() != pred_mean.size())
        throw std::invalid_argument("log_marginal: dimension mismatch");
    const Index ny = y.size();
    const double s2 = sigma * sigma;
    const Vector r = y - H * pred_mean;
    double quad = r.squaredNorm() / s2;
    double logdet = ny * std::log(s2);
    if (widened.cols() > 0) {
        const Matrix W = H * widened;
        Matrix inner = W.transpose() * W;
        inner.diagonal().array() += s2;
        const Eigen::LLT<Matrix> llt(symmetrized(inner));
        if (llt.info() != Eigen::Success) throw IndefiniteMatrixError("log_marginal: inner matrix not SPD");
        const Vector wr = W.transpose() * r;
        quad -= wr.dot(llt.solve(wr)) / s2;
        // det(sigma^2 I_ny + W Wᵀ) = sigma^{2(ny - m)} det(sigma^2 I_m + Wᵀ W)
        const double inner_logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        logdet += inner_logdet - W.cols() * std::log(s2);
    }
    const double out = -0.5 * (ny * std::log(2.0 * std::numbers::pi) + logdet + quad);
    if (!std::isfinite(out)) throw NumericalError("log_marginal: non-finite result");
    return out;
}

/// One-step-ahead log marginal as a function of (rho, sigma) with the
/// rho-independent pieces reduced to small Gram blocks. With a = H P
/// (propagated part) and b = H F (unit forcing block), HL~(rho) = [a, rho b].
class MarginalObjective {
public:
    MarginalObjective(const Prediction& pred, const SparseMatrix& H, const Vector& y) : ny_(y.size()) {
        if (H.rows() != y.size() || H.cols() != pred.mean.size())
            throw std::invalid_argument("MarginalObjective: dimension mismatch");
        const Vector r = y - H * pred.mean;
        const Matrix a = H * pred.propagated;
        const Matrix b = H * pred.forcing_unit;
        k_ = a.cols();
        kf_ = b.cols();
        aa_ = a.transpose() * a;
        ab_ = a.transpose() * b;
        bb_ = b.transpose() * b;
        ar_ = a.transpose() * r;
        br_ = b.transpose() * r;
        rr_ = r.squaredNorm();
    }

    Index observations() const { return ny_; }
    double innovation_rms() const { return ny_ > 0 ? std::sqrt(rr_ / ny_) : 0.0; }

    double log_marginal(double rho, double sigma) const {
        if (!(sigma > 0.0)) throw std::invalid_argument("MarginalObjective: sigma must be positive");
        const double s2 = sigma * sigma;
        const Index m = k_ + kf_;
        double quad = rr_ / s2;
        double logdet = ny_ * std::log(s2);
        if (m > 0) {
            Matrix inner(m, m);
            inner.topLeftCorner(k_, k_) = aa_;
            inner.topRightCorner(k_, kf_) = rho * ab_;
            inner.bottomLeftCorner(kf_, k_) = rho * ab_.transpose();
            inner.bottomRightCorner(kf_, kf_) = (rho * rho) * bb_;
            inner.diagonal().array() += s2;
            Vector wr(m);
            wr << ar_, rho * br_;
            const Eigen::LLT<Matrix> llt(inner);
            if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
            quad -= wr.dot(llt.solve(wr)) / s2;
            logdet += 2.0 * llt.matrixLLT().diagonal().array().log().sum() - m * std::log(s2);
        }
        return -0.5 * (ny_ * std::log(2.0 * std::numbers::pi) + logdet + quad);
    }

private:
    Index ny_, k_ = 0, kf_ = 0;
    Matrix aa_, ab_, bb_;
    Vector ar_, br_;
    double rr_ = 0.0;
};

struct MapOptions {
    double lower_bound = 1e-10;
    double upper_bound = 1e6;
    double fd_step = 1e-6;            // central differences in log-space
    double gradient_tolerance = 1e-6; // projected-gradient norm
    int max_iterations = 200;
    std::vector<double> rho_starts{1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
};

namespace detail {

/// Projected quasi-Newton maximization in two log-space variables with box bounds.
template <typename F>
MapEstimate maximize_box2(const F& objective, std::array<double, 2> x, double lo, double hi, const MapOptions& opts) {
    using V2 = Eigen::Vector2d;
    using M2 = Eigen::Matrix2d;
    V2 p(x[0], x[1]);
    auto clamp = [&](V2 v) { return V2(std::clamp(v(0), lo, hi), std::clamp(v(1), lo, hi)); };
    auto negf = [&](const V2& v) { return -objective(std::exp(v(0)), std::exp(v(1))); };
    auto fd_grad = [&](const V2& v) {
        V2 g;
        for (int i = 0; i < 2; ++i) {
            V2 up = v, dn = v;
            up(i) += opts.fd_step;
            dn(i) -= opts.fd_step;
            const double fu = negf(up), fd = negf(dn);
            // One-sided where the objective is unresolvable (e.g. sigma at its floor).
            if (std::isfinite(fu) && std::isfinite(fd)) g(i) = (fu - fd) / (2.0 * opts.fd_step);
            else if (std::isfinite(fu)) g(i) = (fu - negf(v)) / opts.fd_step;
            else if (std::isfinite(fd)) g(i) = (negf(v) - fd) / opts.fd_step;
            else g(i) = std::numeric_limits<double>::quiet_NaN();
        }
        return g;
    };
    auto projected = [&](const V2& v, const V2& g) {
        V2 pg = g;
        for (int i = 0; i < 2; ++i)
            if ((v(i) <= lo && g(i) > 0.0) || (v(i) >= hi && g(i) < 0.0)) pg(i) = 0.0;
        return pg;
    };

    p = clamp(p);
    double f = negf(p);
    V2 g = fd_grad(p);
    M2 Hinv = M2::Identity();
    MapEstimate est;
    int it = 0;
    for (; it < opts.max_iterations; ++it) {
        const V2 pg = projected(p, g);
        if (!pg.allFinite()) break;
        if (pg.norm() <= opts.gradient_tolerance) {
            est.converged = true;
            break;
        }
        V2 d = -(Hinv * pg);
        for (int i = 0; i < 2; ++i)
            if ((p(i) <= lo && d(i) < 0.0) || (p(i) >= hi && d(i) > 0.0)) d(i) = 0.0;
        if (d.dot(pg) >= 0.0) {
            Hinv = M2::Identity();
            d = -pg;
        }
        // Armijo backtracking along the projected path.
        double t = 1.0;
        V2 trial;
        double ft = f;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            trial = clamp(p + t * d);
            ft = negf(trial);
            if (std::isfinite(ft) && ft <= f + 1e-4 * pg.dot(trial - p)) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted || (trial - p).norm() == 0.0) {
            // No further descent is resolvable at this finite-difference accuracy.
            if (Hinv != M2::Identity()) {
                Hinv = M2::Identity();
                continue;
            }
            break;
        }
        const V2 gn = fd_grad(trial);
        if (!gn.allFinite()) {
            p = trial;
            f = ft;
            break;
        }
        const V2 s = trial - p, yv = gn - g;
        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            const double rho_b = 1.0 / sy;
            const M2 I = M2::Identity();
            Hinv = (I - rho_b * s * yv.transpose()) * Hinv * (I - rho_b * yv * s.transpose()) +
                   rho_b * s * s.transpose();
        }
        p = trial;
        f = ft;
        g = gn;
    }
    est.iterations = it;
    est.rho = std::exp(p(0));
    est.sigma = std::exp(p(1));
    est.objective = -f;
    return est;
}

}  // namespace detail

/// MAP estimate of (rho, sigma) for one step: maximizes
/// log N(y; H m^, HL~(rho)(HL~(rho))ᵀ + sigma^2 I) + log p(rho) + log p(sigma).
/// Starts from the best of a coarse rho grid (and `warm`, if given) with sigma
/// at the innovation RMS.
inline MapEstimate map_step(const MarginalObjective& obj, const HyperPrior& prior, const MapOptions& opts = {},
                            const MapEstimate* warm = nullptr) {
    prior.validate();
    auto posterior = [&](double rho, double sigma) {
        return obj.log_marginal(rho, sigma) + log_truncated_normal(rho, prior.rho_location, prior.rho_scale) +
               log_truncated_normal(sigma, prior.sigma_location, prior.sigma_scale);
    };
    const double lo = std::log(opts.lower_bound), hi = std::log(opts.upper_bound);
    const double sigma0 = std::clamp(obj.innovation_rms() > 0.0 ? obj.innovation_rms() : prior.sigma_scale,
                                     opts.lower_bound, opts.upper_bound);
    std::vector<std::array<double, 2>> starts;
    for (double r : opts.rho_starts) starts.push_back({std::log(r), std::log(sigma0)});
    if (warm && warm->rho > 0.0 && warm->sigma > 0.0) starts.push_back({std::log(warm->rho), std::log(warm->sigma)});
    std::array<double, 2> best = starts.front();
    double best_val = -std::numeric_limits<double>::infinity();
    for (const auto& s : starts) {
        const double v = posterior(std::exp(s[0]), std::exp(s[1]));
        if (v > best_val) {
            best_val = v;
            best = s;
        }
    }
    return detail::maximize_box2(posterior, best, lo, hi, opts);
}

struct EstimationRecord {
    int step = 0;
    double time = 0.0;
    MapEstimate estimate;
};

struct EstimationResult {
    FilterResult filter;
    std::vector<EstimationRecord> estimates;
};

/// LR-ExKF where each step with data first estimates (rho, sigma) by MAP and
/// filters with the estimates. With `enabled` false this is run_filter.
inline EstimationResult run_filter_with_estimation(const GaussianState& initial, const Stepper& stepper,
                                                   const LowRankRoot& forcing, const ObservationModel& obs,
                                                   const DataStream& data, int n_steps, const FilterConfig& cfg,
                                                   const HyperPrior& prior, const MapOptions& map_opts = {},
                                                   const RunOptions& run_opts = {}, bool enabled = true) {
    EstimationResult out;
    if (!enabled) {
        out.filter = run_filter(initial, stepper, forcing, obs, data, n_steps, cfg, run_opts);
        return out;
    }
    const double dt = stepper.config().dt;
    std::optional<MapEstimate> last;
    HyperSelector select = [&](int step, const Prediction& pred, const Vector& y) {
        const MarginalObjective obj(pred, obs.H, y);
        MapEstimate est = map_step(obj, prior, map_opts, last ? &*last : nullptr);
        last = est;
        out.estimates.push_back({step, step * dt, est});
        return std::make_pair(est.rho, est.sigma);
    };
    out.filter = run_filter(initial, stepper, forcing, obs, data, n_steps, cfg, run_opts, select);
    return out;
}

}  // namespace statfem
