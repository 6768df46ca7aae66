#include <doctest.h>

#include <algorithm>
#include <random>

#include "mcln/metrics.hpp"

using namespace mcln;

namespace {

EvalRecord rec(double r, double s, Split split = Split::unique, std::string id = "x") {
  return EvalRecord{std::move(id), r, s, split};
}

std::vector<EvalRecord> random_records(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<EvalRecord> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(rec(u(rng), u(rng), u(rng) < 0.6 ? Split::multiple : Split::unique, "r" + std::to_string(i)));
  return out;
}

}  // namespace

TEST_CASE("acc_at_iou") {
  CHECK(acc_at_iou({rec(1, 1), rec(1, 1)}, 0.25) == 1.0);
  CHECK(acc_at_iou({rec(1, 1), rec(1, 1)}, 0.5, Branch::res) == 1.0);
  CHECK(acc_at_iou({rec(0.3, 0), rec(0.6, 0)}, 0.5) == 0.5);
  CHECK(acc_at_iou({rec(0, 0.3), rec(0, 0.6)}, 0.5, Branch::res) == 0.5);
  CHECK(acc_at_iou({rec(0.5, 0)}, 0.5) == 1.0);
  CHECK_THROWS_AS(acc_at_iou({}, 0.5), EmptyEvaluationError);
  CHECK_THROWS(acc_at_iou({rec(0.5, 0)}, 0.0));
  CHECK_THROWS(acc_at_iou({rec(0.5, 0)}, 1.0));

  std::mt19937_64 rng(1);
  const auto rs = random_records(200, rng);
  double prev = 1.0;
  for (double t = 0.05; t < 1.0; t += 0.05) {
    const double a = acc_at_iou(rs, t);
    CHECK(a <= prev);
    prev = a;
  }
}

TEST_CASE("miou") {
  CHECK(miou({rec(0, 1.0)}) == 1.0);
  CHECK(miou({rec(0, 0.2), rec(0, 0.4)}) == doctest::Approx(0.3));
  CHECK_THROWS_AS(miou({}), EmptyEvaluationError);
  std::mt19937_64 rng(2);
  auto rs = random_records(50, rng);
  const double m = miou(rs);
  std::shuffle(rs.begin(), rs.end(), rng);
  CHECK(miou(rs) == doctest::Approx(m).epsilon(1e-14));
}

TEST_CASE("die3") {
  CHECK_FALSE(is_conflict(0.6, 0.6));
  CHECK(is_conflict(0.6, 0.1));
  CHECK_FALSE(is_conflict(0.5, 0.1));
  CHECK_FALSE(is_conflict(0.6, 0.25));
  CHECK(is_conflict(0.1, 0.6));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const double a = u(rng), b = u(rng);
    CHECK(is_conflict(a, b) == is_conflict(b, a));
  }
  CHECK(die3({rec(0.6, 0.1), rec(0.6, 0.6), rec(0.1, 0.9), rec(0.5, 0.1)}) == 0.5);
  CHECK_THROWS_AS(die3({}), EmptyEvaluationError);
}

TEST_CASE("build_report") {
  SUBCASE("single unique record") {
    const Report r = build_report({rec(0.6, 0.3)});
    CHECK(r.unique.count == 1);
    CHECK(r.unique.rec_acc_05 == 1.0);
    CHECK(r.unique.res_acc_025 == 1.0);
    CHECK(r.unique.res_acc_05 == 0.0);
    CHECK(r.unique.miou == 0.3);
    CHECK(r.multiple.count == 0);
    CHECK(r.multiple.miou == 0.0);
    CHECK(r.overall == r.unique);
  }
  SUBCASE("split metrics merge back to the overall metrics") {
    std::mt19937_64 rng(4);
    const auto rs = random_records(137, rng);
    const Report r = build_report(rs);
    CHECK(r.unique.count + r.multiple.count == 137);
    const double nu = static_cast<double>(r.unique.count), nm = static_cast<double>(r.multiple.count);
    auto merged = [&](double SplitMetrics::*f) { return (nu * r.unique.*f + nm * r.multiple.*f) / 137.0; };
    for (auto f : {&SplitMetrics::rec_acc_025, &SplitMetrics::rec_acc_05, &SplitMetrics::res_acc_025,
                   &SplitMetrics::res_acc_05, &SplitMetrics::miou, &SplitMetrics::die3})
      CHECK(r.overall.*f == doctest::Approx(merged(f)).epsilon(1e-12));

    std::vector<EvalRecord> multiple;
    for (const auto& x : rs)
      if (x.split == Split::multiple) multiple.push_back(x);
    CHECK(r.multiple.miou == doctest::Approx(miou(multiple)));
    CHECK(build_report(rs) == r);
  }
  SUBCASE("json round trip") {
    std::mt19937_64 rng(5);
    const Report r = build_report(random_records(40, rng));
    const auto j = report_to_json(r);
    for (const char* k : {"rec_acc_025", "rec_acc_05", "res_acc_025", "res_acc_05", "miou", "die3", "count"})
      CHECK(j.contains(k));
    CHECK(j["unique"].contains("count"));
    CHECK(j["multiple"].contains("miou"));
    CHECK(report_from_json(nlohmann::json::parse(j.dump())) == r);
  }
  CHECK_THROWS_AS(build_report({}), EmptyEvaluationError);
  CHECK_THROWS(build_report({rec(1.5, 0.2)}));
}

TEST_CASE("csv") {
  const std::string csv = records_to_csv({rec(0.5, 0.25, Split::multiple, "a1"), rec(1, 0, Split::unique, "b2")});
  CHECK(csv.rfind("id,rec_iou,res_iou,split\n", 0) == 0);
  CHECK(csv.find("a1,0.5,0.25,multiple\n") != std::string::npos);
  CHECK(csv.find("b2,1,0,unique\n") != std::string::npos);
}
