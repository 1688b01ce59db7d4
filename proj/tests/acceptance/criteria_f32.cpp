#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "acceptance.hpp"
#include "echotrack/config.hpp"
#include "echotrack/evalkit.hpp"
#include "echotrack/io.hpp"
#include "echotrack/parallel.hpp"
#include "echotrack/training.hpp"

static_assert(sizeof(echotrack::real) == 4, "this translation unit must be built in single precision");

namespace acceptance {
namespace {

namespace fs = std::filesystem;
using namespace echotrack;

constexpr double kLossRatio = 0.5;
constexpr double kMarginPoints = 15.0;
constexpr double kTrainingHours = 4.0;

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Verdict desk_training() {
  RunConfig cfg;
  cfg.train.epochs = 10;
  cfg.train.deterministic = true;
  cfg.validate();
  set_deterministic(true);
  const auto start = std::chrono::steady_clock::now();
  Tracker model(cfg.model, cfg.seed);
  TrainOptions options;
  options.on_step = [](const StepInfo& s) {
    if (s.step % 200 == 0) std::fprintf(stderr, "  [6] step %zu/%zu loss %.5f\n", s.step, s.total_steps, s.loss);
  };
  auto result = train(model, cfg.train, phantom_source(cfg.phantom), cfg.train_samples, options);
  const double hours = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 3600;
  auto report = evaluate_held_out(model, cfg.held_out(), cfg.eval_samples);

  const double first = result.epoch_losses.front(), last = result.epoch_losses.back();
  const double gain_avg = report.model.davg - report.baseline.davg;
  const double gain_d2 = report.model.d2 - report.baseline.d2;
  const bool ok = result.epoch_losses.size() == 10 && last < kLossRatio * first && gain_avg >= kMarginPoints &&
                  gain_d2 >= kMarginPoints && hours <= kTrainingHours;
  std::string d = "loss " + fmt("%.4f", first) + " -> " + fmt("%.4f", last) + " (ratio " + fmt("%.3f", last / first) +
                  ", need < 0.5); held-out " + std::to_string(report.clips) + " clips: model delta_avg " +
                  fmt("%.2f", report.model.davg) + " delta2 " + fmt("%.2f", report.model.d2) + " vs static " +
                  fmt("%.2f", report.baseline.davg) + " / " + fmt("%.2f", report.baseline.d2) + " (need +15 pp on both); " +
                  fmt("%.1f min", hours * 60) + " (limit 4 h)";
  return {6, ok, d};
}

class Workspace {
 public:
  explicit Workspace(std::string cli) : cli_(std::move(cli)) {
    root_ = fs::temp_directory_path() / ("echotrack_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Workspace() { fs::remove_all(root_); }

  int run(const std::string& args) const {
    const std::string cmd = cli_ + " " + args + " >" + p("last.out") + " 2>" + p("last.err");
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string p(const std::string& rel) const { return (root_ / rel).string(); }
  std::string read(const std::string& rel) const { return read_file(root_ / rel); }
  bool exists(const std::string& rel) const { return fs::exists(root_ / rel); }

 private:
  std::string cli_;
  fs::path root_;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

bool is_number(const std::string& s) {
  if (s.empty()) return false;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(v);
}

// Checks one axis' CSV and markdown against the expected variants.
std::string table_problems(const std::string& csv, const std::string& md, AblationAxis axis,
                           const std::vector<std::string>& variants) {
  const auto rows = split(csv, '\n');
  if (rows.size() != variants.size() + 1) return "csv has " + std::to_string(rows.size()) + " lines";
  if (rows[0] != "variant,delta_1,delta_2,delta_4,mte,ait_s,delta_avg,window,neighbors,iterations") return "csv header";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    auto cells = split(rows[i + 1], ',');
    if (cells.size() != 10 || cells[0] != variants[i]) return "csv row " + std::to_string(i + 1);
    for (std::size_t c = 1; c < cells.size(); ++c)
      if (!is_number(cells[c])) return "csv cell " + cells[c];
    if (std::strtod(cells[5].c_str(), nullptr) <= 0) return "non-positive AIT";
  }
  const auto lines = split(md, '\n');
  if (lines.size() < variants.size() + 2) return "markdown too short";
  if (lines[0] != "| " + to_string(axis) + " | δ¹ | δ² | δ⁴ | MTE | AIT (s) |") return "markdown header";
  if (lines[1] != "|---|---|---|---|---|---|") return "markdown rule";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    auto cells = split(lines[i + 2], '|');
    if (cells.size() != 7 || cells[1] != " " + variants[i] + " ") return "markdown row " + std::to_string(i + 1);
  }
  return "";
}

Verdict ablations(const std::string& cli) {
  Workspace ws(cli);
  std::vector<std::string> problems;
  std::string ordering = "not reported";
  std::size_t rows = 0;
  for (auto axis : {AblationAxis::window, AblationAxis::temporal, AblationAxis::reasoning}) {
    const auto name = to_string(axis);
    if (ws.run("--deterministic ablate --axis " + name + " --out " + ws.p("abl")) != 0) {
      problems.push_back(name + ": exit status, " + ws.read("last.err"));
      continue;
    }
    const auto csv = ws.read("abl/ablation_" + name + ".csv");
    const auto md = ws.read("abl/ablation_" + name + ".md");
    const auto variants = default_variants(axis);
    rows += variants.size();
    auto bad = table_problems(csv, md, axis, variants);
    if (!bad.empty()) problems.push_back(name + ": " + bad);
    if (axis == AblationAxis::window) {
      const auto at = md.find("AIT non-decreasing with window size: ");
      if (at == std::string::npos) {
        problems.push_back("window: AIT ordering line missing");
      } else {
        ordering = md.substr(at + 37, md.find(' ', at + 37) - at - 37);
        auto csv_rows = split(csv, '\n');
        ordering += " (";
        for (std::size_t i = 1; i < csv_rows.size(); ++i) {
          auto cells = split(csv_rows[i], ',');
          ordering += (i > 1 ? ", r=" : "r=") + cells[0] + " " + cells[5] + " s";
        }
        ordering += ")";
      }
    }
  }
  std::string d = "3 axes, " + std::to_string(rows) + " variant rows, tables well-formed: " +
                  (problems.empty() ? "yes" : "no") + "; AIT non-decreasing with r (soft): " + ordering;
  for (const auto& p : problems) d += "; " + p;
  return {8, problems.empty(), d};
}

const char* kSmallRun = R"({"seed": 5,
 "model": {"backbone": {"widths": [4, 4, 6, 6]}, "corr": {"window": 3, "dim": 4},
           "refiner": {"neighbors": 2, "blocks": 1, "heads": 2, "width": 12, "iterations": 2}},
 "train": {"epochs": 2, "lr": 0.001},
 "phantom": {"height": 48, "width": 48, "inner_radius": 10, "outer_radius": 18, "frames": 6, "points": 6},
 "data": {"train_samples": 4, "eval_samples": 2}})";

Verdict reproducibility(const std::string& cli) {
  Workspace ws(cli);
  write_file(ws.p("small.json"), kSmallRun);
  std::vector<std::string> failed;
  std::size_t compared = 0;
  auto expect_same = [&](const std::string& a, const std::string& b) {
    ++compared;
    if (!ws.exists(a) || !ws.exists(b) || ws.read(a) != ws.read(b)) failed.push_back(a + " vs " + b);
  };
  auto step = [&](const std::string& args) {
    if (ws.run(args) != 0) failed.push_back("'" + args.substr(0, args.find(' ', 16)) + "' failed: " + ws.read("last.err"));
  };

  for (const char* run : {"1", "2"}) {
    const std::string r = run;
    step("phantom --config " + ws.p("small.json") + " --out " + ws.p("data" + r));
    step("--deterministic train --data " + ws.p("data" + r) + " --out " + ws.p("train" + r));
    step("--deterministic track --checkpoint " + ws.p("train" + r + "/checkpoint.emtw") + " --video " +
         ws.p("data" + r + "/sample_0001.video.emt") + " --queries " + ws.p("data" + r + "/sample_0001.queries.emt") +
         " --out " + ws.p("traj" + r + ".emt") + " --csv " + ws.p("traj" + r + ".csv"));
    step("--deterministic eval --checkpoint " + ws.p("train" + r + "/checkpoint.emtw") + " --data " +
         ws.p("data" + r) + " --out " + ws.p("report" + r));
  }
  for (const char* f : {"sample_0000.video.emt", "sample_0003.gt.emt", "manifest.tsv"})
    expect_same(std::string("data1/") + f, std::string("data2/") + f);
  expect_same("train1/checkpoint.emtw", "train2/checkpoint.emtw");
  expect_same("train1/loss.csv", "train2/loss.csv");
  expect_same("traj1.emt", "traj2.emt");
  expect_same("traj1.csv", "traj2.csv");
  expect_same("report1.md", "report2.md");
  expect_same("report1.csv", "report2.csv");

  // container round trip, in memory and through the files the tool wrote
  std::size_t round_trips = 0;
  for (const char* f : {"data1/sample_0000.video.emt", "data1/sample_0002.gt.emt", "traj1.emt"}) {
    if (!ws.exists(f)) continue;
    const auto bytes = ws.read(f);
    ++round_trips;
    if (encode_container(decode_container(bytes)) != bytes) failed.push_back(std::string("round trip ") + f);
  }
  {
    auto sample = generate(dataset_spec(PhantomSpec{}, 3));
    for (const Tensor& t : {sample.video, sample.trajectories, sample.queries}) {
      ++round_trips;
      const auto enc = encode_container(t);
      if (encode_container(decode_container(enc)) != enc) failed.push_back("round trip in memory");
    }
  }
  if (ws.exists("train1/checkpoint.emtw")) {
    ++round_trips;
    const auto ck = ws.read("train1/checkpoint.emtw");
    if (encode_checkpoint(decode_checkpoint(ck)) != ck) failed.push_back("checkpoint round trip");
  }

  std::string d = std::to_string(compared) + " artifacts compared across two deterministic runs (checkpoint, loss " +
                  "curve, trajectories, eval report, phantom data), " + std::to_string(round_trips) +
                  " byte-exact round trips";
  for (const auto& f : failed) d += "; FAILED " + f;
  return {9, failed.empty() && round_trips == 7, d};
}

}  // namespace

std::vector<Verdict> run_f32(const Selection& only, const std::string& cli) {
  std::vector<Verdict> out;
  if (selected(only, 6)) out.push_back(desk_training());
  if (selected(only, 8)) out.push_back(ablations(cli));
  if (selected(only, 9)) out.push_back(reproducibility(cli));
  return out;
}

}  // namespace acceptance
