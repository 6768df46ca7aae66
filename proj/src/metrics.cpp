#include "mcln/metrics.hpp"

#include <sstream>

#include "mcln/errors.hpp"

namespace mcln {

using nlohmann::json;

void EvalRecord::validate() const {
  if (!(rec_iou >= 0.0 && rec_iou <= 1.0) || !(res_iou >= 0.0 && res_iou <= 1.0)) {
    throw PreconditionError("record " + id + ": IoU outside [0,1]");
  }
}

namespace {

void require_records(const std::vector<EvalRecord>& records, const char* op) {
  if (records.empty()) throw EmptyEvaluationError(std::string(op) + ": no records");
}

double branch_iou(const EvalRecord& r, Branch b) { return b == Branch::rec ? r.rec_iou : r.res_iou; }

SplitMetrics summarize(const std::vector<EvalRecord>& records) {
  SplitMetrics m;
  m.count = records.size();
  if (records.empty()) return m;
  m.rec_acc_025 = acc_at_iou(records, 0.25, Branch::rec);
  m.rec_acc_05 = acc_at_iou(records, 0.5, Branch::rec);
  m.res_acc_025 = acc_at_iou(records, 0.25, Branch::res);
  m.res_acc_05 = acc_at_iou(records, 0.5, Branch::res);
  m.miou = miou(records);
  m.die3 = die3(records);
  return m;
}

json split_to_json(const SplitMetrics& m) {
  return json{{"count", m.count},         {"rec_acc_025", m.rec_acc_025}, {"rec_acc_05", m.rec_acc_05},
              {"res_acc_025", m.res_acc_025}, {"res_acc_05", m.res_acc_05},   {"miou", m.miou},
              {"die3", m.die3}};
}

SplitMetrics split_from_json(const json& j) {
  SplitMetrics m;
  m.count = j.at("count").get<std::size_t>();
  m.rec_acc_025 = j.at("rec_acc_025").get<double>();
  m.rec_acc_05 = j.at("rec_acc_05").get<double>();
  m.res_acc_025 = j.at("res_acc_025").get<double>();
  m.res_acc_05 = j.at("res_acc_05").get<double>();
  m.miou = j.at("miou").get<double>();
  m.die3 = j.at("die3").get<double>();
  return m;
}

}  // namespace

double acc_at_iou(const std::vector<EvalRecord>& records, double threshold, Branch branch) {
  require_records(records, "acc_at_iou");
  if (!(threshold > 0.0 && threshold < 1.0)) throw PreconditionError("acc_at_iou: threshold must be in (0,1)");
  std::size_t hits = 0;
  for (const auto& r : records) hits += branch_iou(r, branch) >= threshold ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double miou(const std::vector<EvalRecord>& records) {
  require_records(records, "miou");
  double total = 0.0;
  for (const auto& r : records) total += r.res_iou;
  return total / static_cast<double>(records.size());
}

bool is_conflict(double rec_iou, double res_iou) {
  return (rec_iou > 0.5 && res_iou < 0.25) || (res_iou > 0.5 && rec_iou < 0.25);
}

double die3(const std::vector<EvalRecord>& records) {
  require_records(records, "die3");
  std::size_t conflicts = 0;
  for (const auto& r : records) conflicts += is_conflict(r.rec_iou, r.res_iou) ? 1 : 0;
  return static_cast<double>(conflicts) / static_cast<double>(records.size());
}

Report build_report(const std::vector<EvalRecord>& records) {
  require_records(records, "build_report");
  std::vector<EvalRecord> unique, multiple;
  for (const auto& r : records) {
    r.validate();
    (r.split == Split::unique ? unique : multiple).push_back(r);
  }
  return Report{summarize(records), summarize(unique), summarize(multiple)};
}

json report_to_json(const Report& r) {
  json j = split_to_json(r.overall);
  j["unique"] = split_to_json(r.unique);
  j["multiple"] = split_to_json(r.multiple);
  return j;
}

Report report_from_json(const json& j) {
  return Report{split_from_json(j), split_from_json(j.at("unique")), split_from_json(j.at("multiple"))};
}

std::string records_to_csv(const std::vector<EvalRecord>& records) {
  std::ostringstream out;
  out.precision(17);
  out << "id,rec_iou,res_iou,split\n";
  for (const auto& r : records) out << r.id << ',' << r.rec_iou << ',' << r.res_iou << ',' << split_name(r.split) << '\n';
  return out.str();
}

}  // namespace mcln
