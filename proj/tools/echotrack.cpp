// echotrack: phantom data, training, tracking, evaluation, ablation, timing.
//
// Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "echotrack/config.hpp"
#include "echotrack/evalkit.hpp"
#include "echotrack/io.hpp"
#include "echotrack/parallel.hpp"

namespace fs = std::filesystem;
using namespace echotrack;

namespace {

struct DataEntry {
  std::size_t index;
  std::uint64_t seed;
  fs::path video, gt, queries;
};

struct Dataset {
  RunConfig config;
  std::vector<DataEntry> entries;
};

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create directory " + dir.string());
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  if (!fs::exists(dir / "manifest.tsv")) throw FormatError(dir.string() + ": no manifest.tsv (run 'phantom' first)");
  d.config = load_run_config(dir / "config.json");
  std::istringstream in(read_file(dir / "manifest.tsv"));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    DataEntry e;
    std::string video, gt, queries;
    if (!(ls >> e.index >> e.seed >> video >> gt >> queries)) throw FormatError("manifest: bad line '" + line + "'");
    e.video = dir / video;
    e.gt = dir / gt;
    e.queries = dir / queries;
    d.entries.push_back(e);
  }
  if (d.entries.empty()) throw FormatError(dir.string() + ": empty manifest");
  return d;
}

Tensor load_queries(const fs::path& path) {
  if (path.extension() == ".csv") return parse_queries_csv(read_file(path));
  return load_tensor(path);
}

void write_config(const fs::path& dir, const RunConfig& cfg) { write_file(dir / "config.json", dump_run_config(cfg)); }

// ------------------------------------------------------------------ phantom

int cmd_phantom(const std::string& config_path, const fs::path& out, std::optional<std::size_t> count,
                std::optional<std::uint64_t> seed, bool held_out) {
  RunConfig cfg = config_or_default(config_path);
  if (seed) cfg.phantom.seed = *seed;
  const std::size_t n = count.value_or(held_out ? cfg.eval_samples : cfg.train_samples);
  const PhantomSpec base = held_out ? cfg.held_out() : cfg.phantom;
  ensure_dir(out);
  std::string manifest;
  for (std::size_t i = 0; i < n; ++i) {
    const auto spec = dataset_spec(base, i);
    const auto sample = generate(spec);
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%04zu", i);
    const std::string s(stem);
    save_tensor(out / (s + ".video.emt"), sample.video);
    save_tensor(out / (s + ".gt.emt"), sample.trajectories);
    save_tensor(out / (s + ".queries.emt"), sample.queries);
    manifest += std::to_string(i) + "\t" + std::to_string(spec.seed) + "\t" + s + ".video.emt\t" + s + ".gt.emt\t" + s +
                ".queries.emt\n";
  }
  write_file(out / "manifest.tsv", manifest);
  write_config(out, cfg);
  std::cerr << "wrote " << n << " samples to " << out.string() << "\n";
  return 0;
}

// -------------------------------------------------------------------- train

int cmd_train(const std::string& config_path, const fs::path& data_dir, const fs::path& out, bool resume,
              std::size_t until_epoch, bool deterministic) {
  auto data = load_dataset(data_dir);
  RunConfig cfg = config_path.empty() ? data.config : load_run_config(config_path);
  if (deterministic) cfg.train.deterministic = true;
  const std::size_t count = std::min(cfg.train_samples, data.entries.size());
  if (count < cfg.train_samples) {
    std::cerr << "note: data holds " << data.entries.size() << " samples, config asks for " << cfg.train_samples << "\n";
  }
  ensure_dir(out);
  const fs::path ckpt_path = out / "checkpoint.emtw";

  Tracker model(cfg.model, cfg.seed);
  OptimState state;
  std::vector<double> losses;
  if (resume && fs::exists(ckpt_path)) {
    auto ckpt = load_checkpoint(ckpt_path);
    restore(ckpt, model.params(), &state);
    losses = ckpt.epoch_losses;
    std::cerr << "resuming at step " << state.step << "\n";
  }

  std::vector<Clip> clips;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& e = data.entries[i];
    clips.push_back({load_tensor(e.video), load_tensor(e.gt), 0});
  }
  ClipSource source = [&clips](std::size_t i) { return clips.at(i); };

  TrainOptions options;
  options.state = &state;
  options.stop_after_epoch = until_epoch;
  options.on_step = [](const StepInfo& s) {
    if ((s.step + 1) % 50 == 0 || s.step + 1 == s.total_steps) {
      std::cerr << "step " << s.step + 1 << "/" << s.total_steps << " epoch " << s.epoch + 1 << " loss "
                << fixed(s.loss, 4) << " lr " << s.lr << "\n";
    }
  };
  if (cfg.train.deterministic) set_deterministic(true);
  auto result = train(model, cfg.train, source, count, options);
  losses.insert(losses.end(), result.epoch_losses.begin(), result.epoch_losses.end());

  save_checkpoint(ckpt_path, capture(model.params(), state.m.empty() ? nullptr : &state, losses));
  std::string csv = "epoch,mean_loss\n";
  for (std::size_t k = 0; k < losses.size(); ++k) csv += std::to_string(k + 1) + "," + fixed(losses[k], 8) + "\n";
  write_file(out / "loss.csv", csv);
  write_config(out, cfg);
  std::cerr << "checkpoint " << ckpt_path.string() << " after " << losses.size() << " epochs\n";
  return 0;
}

// -------------------------------------------------------------------- track

std::unique_ptr<Tracker> load_model(const std::string& config_path, const fs::path& ckpt_path, RunConfig& cfg) {
  fs::path cpath = config_path.empty() ? ckpt_path.parent_path() / "config.json" : fs::path(config_path);
  cfg = load_run_config(cpath);
  auto model = std::make_unique<Tracker>(cfg.model, cfg.seed);
  restore(load_checkpoint(ckpt_path), model->params());
  return model;
}

int cmd_track(const std::string& config_path, const fs::path& ckpt, const fs::path& video_path,
              const fs::path& queries_path, std::size_t query_frame, const fs::path& out, const std::string& csv) {
  RunConfig cfg;
  auto model = load_model(config_path, ckpt, cfg);
  const auto video = load_tensor(video_path);
  const auto queries = load_queries(queries_path);
  if (video.rank() != 4 || video.extent(3) != cfg.model.backbone.in_channels) {
    throw FormatError("video " + to_string(video.shape()) + " does not match the configured " +
                      std::to_string(cfg.model.backbone.in_channels) + " input channel(s)");
  }
  NoGradGuard no_grad;
  const auto traj = model->track(video, queries, query_frame).final_state();
  if (!out.empty()) save_tensor(out, traj);
  if (!csv.empty()) write_file(csv, trajectories_csv(traj));
  if (out.empty() && csv.empty()) std::cout << trajectories_csv(traj);
  return 0;
}

// --------------------------------------------------------------------- eval

std::string scores_table(const std::vector<std::pair<std::string, Scores>>& rows) {
  std::string md = "| | δ¹ | δ² | δ⁴ | δ_avg | MTE |\n|---|---|---|---|---|---|\n";
  for (const auto& [name, s] : rows) {
    md += "| " + name + " | " + fixed(s.d1, 2) + " | " + fixed(s.d2, 2) + " | " + fixed(s.d4, 2) + " | " +
          fixed(s.davg, 2) + " | " + fixed(s.mte, 3) + " |\n";
  }
  return md;
}

std::string scores_csv(const std::vector<std::pair<std::string, Scores>>& rows) {
  std::string csv = "name,delta_1,delta_2,delta_4,delta_avg,mte\n";
  for (const auto& [name, s] : rows) {
    csv += name + "," + fixed(s.d1, 4) + "," + fixed(s.d2, 4) + "," + fixed(s.d4, 4) + "," + fixed(s.davg, 4) + "," +
           fixed(s.mte, 6) + "\n";
  }
  return csv;
}

Scores score_frame(const EvalFrame& ev) {
  Scores s;
  s.d1 = delta_accuracy(ev, 1);
  s.d2 = delta_accuracy(ev, 2);
  s.d4 = delta_accuracy(ev, 4);
  s.davg = (s.d1 + s.d2 + s.d4) / 3;
  s.mte = mte(ev);
  return s;
}

void emit_report(const std::string& out, const std::string& md, const std::string& csv) {
  std::cout << md;
  if (out.empty()) return;
  write_file(out + ".md", md);
  write_file(out + ".csv", csv);
}

int cmd_eval_files(const fs::path& pred_path, const fs::path& ref_path, std::size_t height, std::size_t width,
                   const std::string& out) {
  const auto pred = load_tensor(pred_path), ref = load_tensor(ref_path);
  if (pred.shape() != ref.shape()) {
    throw FormatError("eval: prediction " + to_string(pred.shape()) + " and reference " + to_string(ref.shape()) +
                      " disagree on (T, N)");
  }
  const auto ev = make_eval_frame(pred, ref, height, width);
  std::vector<std::pair<std::string, Scores>> rows{{"prediction", score_frame(ev)}};
  std::string md = scores_table(rows), csv = scores_csv(rows);
  if (pred.extent(1) >= 2) {
    std::vector<std::size_t> order(pred.extent(1));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const double gp = gls(pred, order).peak, gr = gls(ref, order).peak;
    md += "\nPeak GLS: prediction " + fixed(gp, 2) + "%, reference " + fixed(gr, 2) + "%\n";
    csv += "gls_prediction," + fixed(gp, 4) + "\ngls_reference," + fixed(gr, 4) + "\n";
  }
  emit_report(out, md, csv);
  return 0;
}

int cmd_eval_model(const std::string& config_path, const fs::path& ckpt, const fs::path& data_dir,
                   const std::string& out) {
  RunConfig cfg;
  auto model = load_model(config_path, ckpt, cfg);
  auto data = load_dataset(data_dir);
  NoGradGuard no_grad;
  EvalFrame pooled_model, pooled_still;
  std::vector<std::pair<double, double>> gls_pairs;
  for (const auto& e : data.entries) {
    const auto video = load_tensor(e.video), gt = load_tensor(e.gt), queries = load_tensor(e.queries);
    const auto res = model->track(video, queries, 0);
    for (auto* pair : {&pooled_model, &pooled_still}) {
      const auto ev = make_eval_frame(pair == &pooled_model ? res.final_state() : res.initial, gt, video.extent(1),
                                      video.extent(2));
      pair->frames += ev.frames;
      pair->points = ev.points;
      pair->pred.insert(pair->pred.end(), ev.pred.begin(), ev.pred.end());
      pair->ref.insert(pair->ref.end(), ev.ref.begin(), ev.ref.end());
      pair->valid.insert(pair->valid.end(), ev.valid.begin(), ev.valid.end());
    }
    if (gt.extent(1) >= 2) {
      std::vector<std::size_t> order(gt.extent(1));
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      gls_pairs.emplace_back(gls(res.final_state(), order).peak, gls(gt, order).peak);
    }
  }
  std::vector<std::pair<std::string, Scores>> rows{{"model", score_frame(pooled_model)},
                                                   {"static", score_frame(pooled_still)}};
  std::string md = scores_table(rows), csv = scores_csv(rows);
  if (gls_pairs.size() >= 2) {
    const auto a = agreement(gls_pairs);
    md += "\nGLS agreement over " + std::to_string(a.pairs) + " clips: model " + fixed(a.method.mean, 2) + " ± " +
          fixed(a.method.sd, 2) + "%, reference " + fixed(a.reference.mean, 2) + " ± " + fixed(a.reference.sd, 2) +
          "%, μ " + fixed(a.mu, 3) + ", σ " + fixed(a.sigma, 3) + ", MAD " + fixed(a.mad, 3) + "\n";
    csv += "gls_mu," + fixed(a.mu, 6) + "\ngls_sigma," + fixed(a.sigma, 6) + "\ngls_mad," + fixed(a.mad, 6) + "\n";
  }
  emit_report(out, md, csv);
  return 0;
}

// ------------------------------------------------------------------- ablate

int cmd_ablate(const std::string& axis_name, const std::string& config_path, std::vector<std::string> variants,
               const fs::path& out, bool deterministic) {
  const auto axis = parse_ablation_axis(axis_name);
  AblationSettings settings = micro_ablation_settings();
  if (!config_path.empty()) {
    const auto cfg = load_run_config(config_path);
    settings.base = cfg.model;
    settings.train = cfg.train;
    settings.data = cfg.phantom;
    settings.held_out = cfg.held_out();
    settings.train_samples = cfg.train_samples;
    settings.eval_samples = cfg.eval_samples;
    settings.model_seed = cfg.seed;
  }
  if (deterministic) settings.train.deterministic = true;
  settings.variants = std::move(variants);
  auto rows = ablation_run(axis, settings, [](const AblationRow& r) {
    std::cerr << "variant " << r.variant << ": δ_avg " << fixed(r.scores.davg, 2) << " MTE " << fixed(r.scores.mte, 3)
              << " AIT " << fixed(r.ait.seconds, 4) << " s\n";
  });
  const auto md = ablation_markdown(axis, rows);
  std::cout << md;
  if (!out.empty()) {
    ensure_dir(out);
    write_file(out / ("ablation_" + axis_name + ".csv"), ablation_csv(rows));
    write_file(out / ("ablation_" + axis_name + ".md"), md);
  }
  return 0;
}

// -------------------------------------------------------------------- bench

int cmd_bench(const std::string& config_path, const fs::path& ckpt, const fs::path& data_dir, std::size_t threads,
              const std::string& out) {
  RunConfig cfg;
  auto model = load_model(config_path, ckpt, cfg);
  auto data = load_dataset(data_dir);
  std::vector<TrackInput> videos;
  for (const auto& e : data.entries) videos.push_back({load_tensor(e.video), load_tensor(e.queries), 0});
  const auto r = ait(*model, videos, threads);
  std::string md = "| videos | threads | r | K | m | AIT (s) |\n|---|---|---|---|---|---|\n| " +
                   std::to_string(r.videos) + " | " + std::to_string(r.threads) + " | " + std::to_string(r.window) +
                   " | " + std::to_string(r.neighbors) + " | " + std::to_string(r.iterations) + " | " +
                   fixed(r.seconds, 4) + " |\n\nOne untimed warm-up run on the first video precedes timing.\n";
  std::string csv = "videos,threads,window,neighbors,iterations,ait_s\n" + std::to_string(r.videos) + "," +
                    std::to_string(r.threads) + "," + std::to_string(r.window) + "," + std::to_string(r.neighbors) +
                    "," + std::to_string(r.iterations) + "," + fixed(r.seconds, 6) + "\n";
  emit_report(out, md, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Myocardial point tracking on synthetic echo phantoms"};
  app.require_subcommand(1);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "Single-threaded kernels and fixed reduction order");

  std::string config;
  std::string out;

  auto* phantom = app.add_subcommand("phantom", "Generate a phantom dataset");
  std::optional<std::size_t> count;
  std::optional<std::uint64_t> seed;
  bool held_out = false;
  phantom->add_option("--config", config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  phantom->add_option("--out", out, "Output directory")->required();
  phantom->add_option("--count", count, "Number of samples (default: data.train_samples)");
  phantom->add_option("--seed", seed, "Overrides phantom.seed");
  phantom->add_flag("--held-out", held_out, "Draw from the held-out seed stream");

  auto* train_cmd = app.add_subcommand("train", "Train a model on a phantom dataset");
  std::string data_dir;
  bool resume = false;
  std::size_t until_epoch = 0;
  train_cmd->add_option("--config", config, "Run configuration (default: the dataset's)")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  train_cmd->add_option("--out", out, "Run directory")->required();
  train_cmd->add_flag("--resume", resume, "Continue from <out>/checkpoint.emtw");
  train_cmd->add_option("--until-epoch", until_epoch, "Stop after this epoch (0: run all)");

  auto* track = app.add_subcommand("track", "Track query points through a video");
  std::string ckpt, video, queries, csv;
  std::size_t query_frame = 0;
  track->add_option("--config", config, "Run configuration (default: next to the checkpoint)");
  track->add_option("--checkpoint", ckpt, "Weights file")->required()->check(CLI::ExistingFile);
  track->add_option("--video", video, "Video container [T,H,W,C]")->required()->check(CLI::ExistingFile);
  track->add_option("--queries", queries, "Queries container [N,2] or x,y CSV")->required()->check(CLI::ExistingFile);
  track->add_option("--query-frame", query_frame, "Frame the queries live on");
  track->add_option("--out", out, "Trajectory container [T,N,2]");
  track->add_option("--csv", csv, "Trajectory CSV (t,i,x,y)");

  auto* eval = app.add_subcommand("eval", "Score trajectories or a trained model");
  std::string pred, ref;
  std::size_t height = 64, width = 64;
  eval->add_option("--pred", pred, "Predicted trajectories")->check(CLI::ExistingFile);
  eval->add_option("--ref", ref, "Reference trajectories")->check(CLI::ExistingFile);
  eval->add_option("--height", height, "Frame height the trajectories refer to");
  eval->add_option("--width", width, "Frame width the trajectories refer to");
  eval->add_option("--checkpoint", ckpt, "Evaluate this model on --data instead")->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "Dataset directory");
  eval->add_option("--config", config, "Run configuration (default: next to the checkpoint)");
  eval->add_option("--out", out, "Report prefix; writes <out>.md and <out>.csv");

  auto* ablate = app.add_subcommand("ablate", "Train and score every variant along one axis");
  std::string axis;
  std::vector<std::string> variants;
  ablate->add_option("--axis", axis, "window | temporal | reasoning")->required();
  ablate->add_option("--config", config, "Run configuration (default: micro settings)")->check(CLI::ExistingFile);
  ablate->add_option("--variants", variants, "Subset of variants (default: the whole axis)");
  ablate->add_option("--out", out, "Report directory");

  auto* bench = app.add_subcommand("bench", "Average inference time per video");
  std::size_t threads = 1;
  bench->add_option("--checkpoint", ckpt, "Weights file")->required()->check(CLI::ExistingFile);
  bench->add_option("--data", data_dir, "Dataset directory")->required();
  bench->add_option("--config", config, "Run configuration (default: next to the checkpoint)");
  bench->add_option("--threads", threads, "Worker threads while timing");
  bench->add_option("--out", out, "Report prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (deterministic) set_deterministic(true);
    if (*phantom) return cmd_phantom(config, out, count, seed, held_out);
    if (*train_cmd) return cmd_train(config, data_dir, out, resume, until_epoch, deterministic);
    if (*track) return cmd_track(config, ckpt, video, queries, query_frame, out, csv);
    if (*eval) {
      if (!ckpt.empty()) {
        if (data_dir.empty()) throw std::invalid_argument("eval: --checkpoint needs --data");
        return cmd_eval_model(config, ckpt, data_dir, out);
      }
      if (pred.empty() || ref.empty()) throw std::invalid_argument("eval: give --pred and --ref, or --checkpoint and --data");
      return cmd_eval_files(pred, ref, height, width, out);
    }
    if (*ablate) return cmd_ablate(axis, config, variants, out, deterministic);
    if (*bench) return cmd_bench(config, ckpt, data_dir, threads, out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
