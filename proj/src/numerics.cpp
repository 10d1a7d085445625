#include "facet/numerics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <thread>

#include "facet/rng.hpp"

namespace facet {
namespace numerics {

RegressionFit ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                  const OlsOptions& opt) {
  const int n = static_cast<int>(X.rows());
  const int k = static_cast<int>(X.cols());
  if (n != y.size()) throw facet::domain_error("ols: X rows and y length differ");
  if (n == 0 || k == 0) throw facet::domain_error("ols: empty design");

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(opt.rank_tol);
  int rank = static_cast<int>(qr.rank());

  RegressionFit fit;
  fit.n = n;
  fit.rank = rank;
  fit.beta = Eigen::VectorXd::Zero(k);

  std::vector<int> keep;
  keep.reserve(static_cast<std::size_t>(rank));
  const auto& perm = qr.colsPermutation().indices();
  std::vector<char> kept(static_cast<std::size_t>(k), 0);
  for (int i = 0; i < rank; ++i) {
    keep.push_back(perm[i]);
    kept[static_cast<std::size_t>(perm[i])] = 1;
  }
  std::sort(keep.begin(), keep.end());
  for (int j = 0; j < k; ++j)
    if (!kept[static_cast<std::size_t>(j)]) fit.dropped.push_back(j);

  Eigen::MatrixXd Xr(n, rank);
  for (int j = 0; j < rank; ++j) Xr.col(j) = X.col(keep[static_cast<std::size_t>(j)]);

  Eigen::MatrixXd xtx = Xr.transpose() * Xr;
  Eigen::LLT<Eigen::MatrixXd> llt(xtx);
  Eigen::VectorXd br;
  if (llt.info() == Eigen::Success) {
    br = llt.solve(Xr.transpose() * y);
  } else {
    br = Xr.colPivHouseholderQr().solve(y);
  }
  for (int j = 0; j < rank; ++j) fit.beta[keep[static_cast<std::size_t>(j)]] = br[j];

  fit.fitted = Xr * br;
  fit.residuals = y - fit.fitted;
  double dof = std::max(1, n - rank);
  fit.sigma2 = fit.residuals.squaredNorm() / dof;

  if (opt.cov != CovKind::none) {
    Eigen::MatrixXd bread;
    if (llt.info() == Eigen::Success)
      bread = llt.solve(Eigen::MatrixXd::Identity(rank, rank));
    else
      bread = xtx.completeOrthogonalDecomposition().pseudoInverse();
    Eigen::MatrixXd vr;
    if (opt.cov == CovKind::classical) {
      vr = fit.sigma2 * bread;
    } else if (opt.cov == CovKind::hc1) {
      Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(rank, rank);
      for (int i = 0; i < n; ++i) {
        double r2 = fit.residuals[i] * fit.residuals[i];
        meat.noalias() += r2 * Xr.row(i).transpose() * Xr.row(i);
      }
      vr = bread * meat * bread * (static_cast<double>(n) / dof);
    } else {
      if (!opt.clusters || static_cast<int>(opt.clusters->size()) != n)
        throw facet::domain_error("ols: cluster ids required for cluster covariance");
      std::map<int, Eigen::VectorXd> sums;
      for (int i = 0; i < n; ++i) {
        auto [it, fresh] =
            sums.try_emplace((*opt.clusters)[static_cast<std::size_t>(i)],
                             Eigen::VectorXd::Zero(rank));
        it->second.noalias() += fit.residuals[i] * Xr.row(i).transpose();
      }
      Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(rank, rank);
      for (const auto& [c, s] : sums) meat.noalias() += s * s.transpose();
      double g = static_cast<double>(sums.size());
      if (g < 2) throw facet::domain_error("ols: need at least two clusters");
      double factor = g / (g - 1.0) * (n - 1.0) / dof;
      vr = bread * meat * bread * factor;
    }
    fit.cov = Eigen::MatrixXd::Zero(k, k);
    for (int aa = 0; aa < rank; ++aa)
      for (int bb = 0; bb < rank; ++bb)
        fit.cov(keep[static_cast<std::size_t>(aa)],
                keep[static_cast<std::size_t>(bb)]) = vr(aa, bb);
  }
  return fit;
}

AbsorbResult absorb_fixed_effects(Eigen::MatrixXd& cols,
                                  const std::vector<std::vector<int>>& factors,
                                  double tol, int max_iter) {
  AbsorbResult res;
  const int n = static_cast<int>(cols.rows());
  for (const auto& f : factors)
    if (static_cast<int>(f.size()) != n)
      throw facet::domain_error("absorb: factor length mismatch");
  if (factors.empty()) {
    res.converged = true;
    return res;
  }

  std::vector<int> sizes;
  for (const auto& f : factors) {
    int mx = 0;
    for (int g : f) {
      if (g < 0) throw facet::domain_error("absorb: negative group id");
      mx = std::max(mx, g + 1);
    }
    sizes.push_back(mx);
  }

  for (int it = 0; it < max_iter; ++it) {
    double max_change = 0.0;
    for (std::size_t fi = 0; fi < factors.size(); ++fi) {
      const auto& f = factors[fi];
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(sizes[fi], cols.cols());
      Eigen::VectorXd cnt = Eigen::VectorXd::Zero(sizes[fi]);
      for (int i = 0; i < n; ++i) {
        sums.row(f[static_cast<std::size_t>(i)]) += cols.row(i);
        cnt[f[static_cast<std::size_t>(i)]] += 1.0;
      }
      for (int g = 0; g < sizes[fi]; ++g)
        if (cnt[g] > 0) sums.row(g) /= cnt[g];
      for (int i = 0; i < n; ++i) {
        auto mean = sums.row(f[static_cast<std::size_t>(i)]);
        max_change = std::max(max_change, mean.cwiseAbs().maxCoeff());
        cols.row(i) -= mean;
      }
    }
    res.iterations = it + 1;
    if (max_change < tol) {
      res.converged = true;
      return res;
    }
  }
  return res;
}

LogitFit logit_irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                    double tol, int max_iter) {
  const int n = static_cast<int>(X.rows());
  const int k = static_cast<int>(X.cols());
  if (n != y.size()) throw facet::domain_error("logit: X rows and y length differ");
  for (int i = 0; i < n; ++i)
    if (y[i] != 0.0 && y[i] != 1.0)
      throw facet::domain_error("logit: outcome must be 0/1");

  // detect collinear columns once up front
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-9);
  int rank = static_cast<int>(qr.rank());
  std::vector<int> keep;
  {
    const auto& perm = qr.colsPermutation().indices();
    std::vector<char> kept(static_cast<std::size_t>(k), 0);
    for (int i = 0; i < rank; ++i) kept[static_cast<std::size_t>(perm[i])] = 1;
    for (int j = 0; j < k; ++j)
      if (kept[static_cast<std::size_t>(j)]) keep.push_back(j);
  }
  Eigen::MatrixXd Xr(n, rank);
  for (int j = 0; j < rank; ++j) Xr.col(j) = X.col(keep[static_cast<std::size_t>(j)]);

  LogitFit fit;
  fit.n = n;
  for (int j = 0; j < k; ++j)
    if (std::find(keep.begin(), keep.end(), j) == keep.end())
      fit.dropped.push_back(j);

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(rank);
  Eigen::VectorXd eta(n), p(n), w(n), z(n);
  Eigen::MatrixXd info(rank, rank);
  for (int it = 0; it < max_iter; ++it) {
    eta = Xr * beta;
    if (eta.cwiseAbs().maxCoeff() > 40.0)
      throw facet::numerical_error(
          "logit did not stabilize: linear predictor diverged "
          "(complete or quasi-complete separation is the usual cause)");
    for (int i = 0; i < n; ++i) {
      p[i] = 1.0 / (1.0 + std::exp(-eta[i]));
      w[i] = std::max(p[i] * (1.0 - p[i]), 1e-12);
      z[i] = eta[i] + (y[i] - p[i]) / w[i];
    }
    info = Xr.transpose() * w.asDiagonal() * Xr;
    Eigen::VectorXd beta_new = info.ldlt().solve(Xr.transpose() * (w.asDiagonal() * z));
    double change = (beta_new - beta).cwiseAbs().maxCoeff();
    beta = beta_new;
    fit.iterations = it + 1;
    if (change < tol) break;
    if (it == max_iter - 1)
      throw facet::numerical_error("logit IRLS did not converge");
  }

  fit.beta = Eigen::VectorXd::Zero(k);
  for (int j = 0; j < rank; ++j) fit.beta[keep[static_cast<std::size_t>(j)]] = beta[j];
  eta = Xr * beta;
  fit.fitted.resize(n);
  for (int i = 0; i < n; ++i) fit.fitted[i] = 1.0 / (1.0 + std::exp(-eta[i]));
  Eigen::MatrixXd vr = info.ldlt().solve(Eigen::MatrixXd::Identity(rank, rank));
  fit.cov = Eigen::MatrixXd::Zero(k, k);
  for (int aa = 0; aa < rank; ++aa)
    for (int bb = 0; bb < rank; ++bb)
      fit.cov(keep[static_cast<std::size_t>(aa)], keep[static_cast<std::size_t>(bb)]) =
          vr(aa, bb);
  return fit;
}

Eigen::MatrixXd poly_features(const Eigen::MatrixXd& X, int degree) {
  if (degree < 1 || degree > 2)
    throw facet::domain_error("poly_features supports degree 1 or 2");
  const int n = static_cast<int>(X.rows());
  const int p = static_cast<int>(X.cols());
  int cols = 1 + p + (degree == 2 ? p * (p + 1) / 2 : 0);
  Eigen::MatrixXd out(n, cols);
  out.col(0).setOnes();
  for (int j = 0; j < p; ++j) out.col(1 + j) = X.col(j);
  if (degree == 2) {
    int c = 1 + p;
    for (int i = 0; i < p; ++i)
      for (int j = i; j < p; ++j)
        out.col(c++) = X.col(i).cwiseProduct(X.col(j));
  }
  return out;
}

namespace {

MinimizeResult nelder_mead_once(const std::function<double(const Eigen::VectorXd&)>& f,
                                const Eigen::VectorXd& x0, double step,
                                double tol, int max_evals) {
  const int d = static_cast<int>(x0.size());
  std::vector<Eigen::VectorXd> v(static_cast<std::size_t>(d) + 1, x0);
  std::vector<double> fv(static_cast<std::size_t>(d) + 1);
  int evals = 0;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++evals;
    double val = f(x);
    if (std::isnan(val)) val = std::numeric_limits<double>::infinity();
    return val;
  };
  for (int i = 0; i < d; ++i)
    v[static_cast<std::size_t>(i) + 1][i] += step * (std::abs(x0[i]) > 1.0 ? std::abs(x0[i]) : 1.0);
  for (std::size_t i = 0; i < v.size(); ++i) fv[i] = eval(v[i]);

  std::vector<int> order(v.size());
  MinimizeResult res;
  while (evals < max_evals) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return fv[a] < fv[b]; });
    int best = order[0], worst = order.back(), second = order[order.size() - 2];

    double diam = 0.0;
    for (std::size_t i = 1; i < v.size(); ++i)
      diam = std::max(diam, (v[static_cast<std::size_t>(order[i])] -
                             v[static_cast<std::size_t>(best)]).cwiseAbs().maxCoeff());
    if (diam < tol) {
      res.converged = true;
      break;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
    for (std::size_t i = 0; i + 1 < order.size(); ++i)
      centroid += v[static_cast<std::size_t>(order[i])];
    centroid /= static_cast<double>(d);

    Eigen::VectorXd xr = centroid + (centroid - v[static_cast<std::size_t>(worst)]);
    double fr = eval(xr);
    if (fr < fv[static_cast<std::size_t>(best)]) {
      Eigen::VectorXd xe = centroid + 2.0 * (centroid - v[static_cast<std::size_t>(worst)]);
      double fe = eval(xe);
      if (fe < fr) {
        v[static_cast<std::size_t>(worst)] = xe;
        fv[static_cast<std::size_t>(worst)] = fe;
      } else {
        v[static_cast<std::size_t>(worst)] = xr;
        fv[static_cast<std::size_t>(worst)] = fr;
      }
    } else if (fr < fv[static_cast<std::size_t>(second)]) {
      v[static_cast<std::size_t>(worst)] = xr;
      fv[static_cast<std::size_t>(worst)] = fr;
    } else {
      bool outside = fr < fv[static_cast<std::size_t>(worst)];
      Eigen::VectorXd xc =
          outside ? centroid + 0.5 * (xr - centroid)
                  : centroid + 0.5 * (v[static_cast<std::size_t>(worst)] - centroid);
      double fc = eval(xc);
      if (fc < (outside ? fr : fv[static_cast<std::size_t>(worst)])) {
        v[static_cast<std::size_t>(worst)] = xc;
        fv[static_cast<std::size_t>(worst)] = fc;
      } else {  // shrink toward best
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (static_cast<int>(i) == best) continue;
          v[i] = v[static_cast<std::size_t>(best)] +
                 0.5 * (v[i] - v[static_cast<std::size_t>(best)]);
          fv[i] = eval(v[i]);
        }
      }
    }
  }
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (fv[i] < fv[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  res.x = v[static_cast<std::size_t>(best)];
  res.f = fv[static_cast<std::size_t>(best)];
  res.evaluations = evals;
  return res;
}

}  // namespace

MinimizeResult minimize(const std::function<double(const Eigen::VectorXd&)>& f,
                        const Eigen::VectorXd& x0, const MinimizeOptions& opt) {
  Rng rng(opt.seed);
  MinimizeResult best = nelder_mead_once(f, x0, opt.initial_step, opt.tol, opt.max_iter);
  for (int r = 0; r < opt.restarts; ++r) {
    Eigen::VectorXd start = best.x;
    for (int i = 0; i < start.size(); ++i) {
      double scale = std::abs(start[i]) > 1.0 ? std::abs(start[i]) : 1.0;
      start[i] += opt.jitter * scale * rng.normal();
    }
    MinimizeResult trial = nelder_mead_once(f, start, opt.initial_step, opt.tol, opt.max_iter);
    trial.evaluations += best.evaluations;
    if (trial.f < best.f) {
      best = trial;
    } else {
      best.evaluations = trial.evaluations;
    }
  }
  return best;
}

BootstrapResult cluster_bootstrap(
    const BootstrapPlan& plan, int n_clusters,
    const std::function<std::optional<Eigen::VectorXd>(
        const std::vector<int>&, std::uint64_t)>& estimator,
    const std::function<bool(const Eigen::VectorXd&)>& retain) {
  if (n_clusters <= 0) throw facet::domain_error("bootstrap: no clusters");
  BootstrapResult out;
  out.estimates.resize(static_cast<std::size_t>(plan.B));
  out.retained.assign(static_cast<std::size_t>(plan.B), 0);

  Rng master(plan.seed);
  int n_threads = plan.threads > 0
                      ? plan.threads
                      : static_cast<int>(std::thread::hardware_concurrency());
  if (n_threads < 1) n_threads = 1;
  n_threads = std::min(n_threads, plan.B);

  std::atomic<int> next{0};
  std::atomic<int> failed{0};
  auto worker = [&]() {
    for (;;) {
      int r = next.fetch_add(1);
      if (r >= plan.B) return;
      Rng rng = master.substream(static_cast<std::uint64_t>(r));
      std::vector<int> draw(static_cast<std::size_t>(n_clusters));
      for (auto& d : draw)
        d = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_clusters)));
      std::optional<Eigen::VectorXd> est;
      try {
        est = estimator(draw, rng.next_u64());
      } catch (const facet::error&) {
        est.reset();
      }
      if (est) {
        out.estimates[static_cast<std::size_t>(r)] = std::move(*est);
        bool keep = !retain || retain(out.estimates[static_cast<std::size_t>(r)]);
        out.retained[static_cast<std::size_t>(r)] = keep ? 1 : 0;
      } else {
        failed.fetch_add(1);
      }
    }
  };
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  out.n_failed = failed.load();
  return out;
}

Eigen::VectorXd bootstrap_sd(const BootstrapResult& r) {
  int n = r.n_retained();
  if (n < 2) throw facet::numerical_error("bootstrap: fewer than two retained replicates");
  int dim = 0;
  for (std::size_t i = 0; i < r.estimates.size(); ++i)
    if (r.retained[i]) {
      dim = static_cast<int>(r.estimates[i].size());
      break;
    }
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  for (std::size_t i = 0; i < r.estimates.size(); ++i)
    if (r.retained[i]) mean += r.estimates[i];
  mean /= n;
  Eigen::VectorXd ss = Eigen::VectorXd::Zero(dim);
  for (std::size_t i = 0; i < r.estimates.size(); ++i)
    if (r.retained[i]) ss += (r.estimates[i] - mean).cwiseAbs2();
  return (ss / (n - 1)).cwiseSqrt();
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> bootstrap_ci(
    const BootstrapResult& r, double level) {
  int n = r.n_retained();
  if (n < 2) throw facet::numerical_error("bootstrap: fewer than two retained replicates");
  int dim = 0;
  for (std::size_t i = 0; i < r.estimates.size(); ++i)
    if (r.retained[i]) {
      dim = static_cast<int>(r.estimates[i].size());
      break;
    }
  double alpha = (1.0 - level) / 2.0;
  Eigen::VectorXd lo(dim), hi(dim);
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(n));
  auto quantile = [&](double q) {
    double pos = q * (vals.size() - 1);
    std::size_t i0 = static_cast<std::size_t>(pos);
    double frac = pos - static_cast<double>(i0);
    if (i0 + 1 >= vals.size()) return vals.back();
    return vals[i0] * (1.0 - frac) + vals[i0 + 1] * frac;
  };
  for (int j = 0; j < dim; ++j) {
    vals.clear();
    for (std::size_t i = 0; i < r.estimates.size(); ++i)
      if (r.retained[i]) vals.push_back(r.estimates[i][j]);
    std::sort(vals.begin(), vals.end());
    lo[j] = quantile(alpha);
    hi[j] = quantile(1.0 - alpha);
  }
  return {lo, hi};
}

}  // namespace numerics
}  // namespace facet
