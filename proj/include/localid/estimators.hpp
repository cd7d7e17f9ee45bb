#pragma once

// Sample-based estimators. Every estimator works on the empirical law of the
// dataset, so cell indices of the data index the influence tables directly.

#include <string>
#include <vector>

#include "json.hpp"
#include "localid/efficiency.hpp"
#include "localid/finite_law.hpp"

namespace localid {

enum class Method { PlugIn, OneStep, MinDist, IS, ES, Smoothed };
std::string method_name(Method m);
Method method_from_name(const std::string& s);

struct EstimateResult {
  std::string estimand;
  Method method = Method::PlugIn;
  double estimate = 0.0;
  double se = 0.0;
  std::vector<double> influence;  // one per observation, centred
  std::size_t n = 0;
  std::vector<std::string> flags;
};

// Builds the result from per-cell influence values on the empirical law.
EstimateResult make_estimate(const Dataset& data, std::string estimand, Method m, double estimate,
                             const std::vector<double>& per_cell, std::vector<std::string> flags = {});

struct ArmEstimates {
  EstimateResult mu1, mu0, mu;
};

EstimateResult estimate_ate_uc(const Dataset& data);
// theta(P~) + E_n[EIF at P~], where P~ adds `pseudo` counts to every support cell.
EstimateResult estimate_ate_uc_smoothed(const Dataset& data, double pseudo = 1.0);

ArmEstimates plug_in_lt(const Dataset& data, double rel_tol = kRankTolerance);
ArmEstimates one_step_lt(const Dataset& data, double rel_tol = kRankTolerance);
ArmEstimates mind_lt(const Dataset& data, double rel_tol = kRankTolerance);

struct NcEstimates {
  ArmEstimates plug_in, one_step;
};
NcEstimates nc_estimators(const Dataset& data, double rel_tol = kRankTolerance);

enum class AsdMode { IS, ES };
EstimateResult npiv_asd(const Dataset& data, AsdMode mode, double rel_tol = kRankTolerance);

nlohmann::json to_json(const EstimateResult& r, bool with_influence = false);

}  // namespace localid
