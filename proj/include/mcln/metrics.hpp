#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcln/data.hpp"

namespace mcln {

struct EvalRecord {
  std::string id;
  double rec_iou = 0.0;
  double res_iou = 0.0;
  Split split = Split::unique;

  void validate() const;
};

struct SplitMetrics {
  std::size_t count = 0;
  // All zero when count == 0.
  double rec_acc_025 = 0.0, rec_acc_05 = 0.0;
  double res_acc_025 = 0.0, res_acc_05 = 0.0;
  double miou = 0.0;
  double die3 = 0.0;

  bool operator==(const SplitMetrics&) const = default;
};

struct Report {
  SplitMetrics overall, unique, multiple;

  bool operator==(const Report&) const = default;
};

enum class Branch { rec, res };

// Fraction of records with IoU >= threshold on the chosen branch.
double acc_at_iou(const std::vector<EvalRecord>& records, double threshold, Branch branch = Branch::rec);
double miou(const std::vector<EvalRecord>& records);
// (rec > 0.5 and res < 0.25) or (res > 0.5 and rec < 0.25).
bool is_conflict(double rec_iou, double res_iou);
double die3(const std::vector<EvalRecord>& records);

Report build_report(const std::vector<EvalRecord>& records);

nlohmann::json report_to_json(const Report& r);
Report report_from_json(const nlohmann::json& j);
std::string records_to_csv(const std::vector<EvalRecord>& records);

}  // namespace mcln
