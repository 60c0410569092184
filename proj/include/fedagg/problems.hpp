#pragma once

// Synthetic quadratic client suites for the theory track.

#include "fedagg/objectives.hpp"
#include "fedagg/rng.hpp"

#include <Eigen/QR>

#include <stdexcept>
#include <string>
#include <vector>

namespace fedagg {

enum class Heterogeneity {
  Identical,        // every client is the same quadratic, so Gamma = 0
  SharedCurvature,  // same A, client-specific optima
  Heterogeneous,    // client-specific A and optima
};

inline Heterogeneity parse_heterogeneity(const std::string& s) {
  if (s == "identical") return Heterogeneity::Identical;
  if (s == "shared-curvature") return Heterogeneity::SharedCurvature;
  if (s == "heterogeneous") return Heterogeneity::Heterogeneous;
  throw std::invalid_argument("unknown heterogeneity '" + s + "' (expected identical, shared-curvature or heterogeneous)");
}

inline std::string to_string(Heterogeneity h) {
  switch (h) {
    case Heterogeneity::Identical:
      return "identical";
    case Heterogeneity::SharedCurvature:
      return "shared-curvature";
    case Heterogeneity::Heterogeneous:
      return "heterogeneous";
  }
  return "";
}

struct QuadraticSuite {
  int dim = 10;
  int n_clients = 2;
  double eig_min = 1.0;
  double eig_max = 4.0;
  Heterogeneity heterogeneity = Heterogeneity::Heterogeneous;
  double optimum_spread = 1.0;  // std-dev of client optima around the origin
  double noise_sd = 0.1;        // per-coordinate gradient noise
  double init_scale = 3.0;      // std-dev of the shared starting point
};

struct QuadraticProblem {
  std::vector<QuadraticObjective> clients;
  ParamVector w0;
};

namespace detail {

inline Matrix random_rotation(Stream& rng, int dim) {
  Matrix g(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(dim, dim);
}

// Q diag(eig) Q' with eigenvalues spread over [lo, hi]; both ends are always present.
inline Matrix spd_with_spectrum(Stream& rng, int dim, double lo, double hi, bool random_interior) {
  Eigen::VectorXd eig(dim);
  for (int j = 0; j < dim; ++j) {
    if (dim == 1) {
      eig[j] = lo;
    } else if (j == 0 || j == dim - 1 || !random_interior) {
      eig[j] = lo + (hi - lo) * static_cast<double>(j) / (dim - 1);
    } else {
      eig[j] = lo + (hi - lo) * rng.uniform();
    }
  }
  const Matrix q = random_rotation(rng, dim);
  Matrix a = q * eig.asDiagonal() * q.transpose();
  return 0.5 * (a + a.transpose());
}

}  // namespace detail

inline QuadraticProblem make_quadratic_problem(const QuadraticSuite& s, std::uint64_t seed) {
  if (s.dim < 1 || s.n_clients < 1) throw std::invalid_argument("quadratic suite: dim and n_clients must be positive");
  if (!(s.eig_min > 0.0) || s.eig_max < s.eig_min)
    throw std::invalid_argument("quadratic suite: need 0 < eig_min <= eig_max");
  Stream rng(seed, Purpose::DataGeneration);
  QuadraticProblem out;
  const Matrix shared = detail::spd_with_spectrum(rng, s.dim, s.eig_min, s.eig_max, false);
  ParamVector shared_opt(s.dim);
  for (auto& v : shared_opt) v = s.optimum_spread * rng.normal();
  for (int i = 0; i < s.n_clients; ++i) {
    Matrix a = s.heterogeneity == Heterogeneity::Heterogeneous
                   ? detail::spd_with_spectrum(rng, s.dim, s.eig_min, s.eig_max, true)
                   : shared;
    ParamVector opt = shared_opt;
    if (s.heterogeneity != Heterogeneity::Identical)
      for (auto& v : opt) v = s.optimum_spread * rng.normal();
    ParamVector b = a * opt;
    out.clients.emplace_back(std::move(a), std::move(b), 0.0, s.noise_sd);
  }
  Stream init(seed, Purpose::Initialization);
  out.w0.resize(s.dim);
  for (auto& v : out.w0) v = s.init_scale * init.normal();
  return out;
}

}  // namespace fedagg
