// pargan: command-line driver for the two-phase pipeline.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print one
// line to stderr, `error <kind>: <message>`.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "config.hpp"
#include "pargan/detect.hpp"
#include "pargan/realness.hpp"
#include "pargan/train.hpp"
#include "svg.hpp"

#ifndef PARGAN_VERSION
#define PARGAN_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace pargan;
using nlohmann::json;

namespace {

// Raised for bad input detected before any work starts; maps to exit 2.
struct UsageError {
  std::string kind, message;
};

template <typename F>
auto as_usage(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const pargan::Error& e) {
    throw UsageError{e.kind(), e.what()};
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f << text;
  }
  fs::rename(tmp, path);
}

// Everything needed to rerun a command: its argv, the effective config and the
// files it touched.
struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config;
  std::uint64_t seed = 0;
  json inputs = json::object(), outputs = json::object();

  void write(const std::string& path, double seconds) const {
    json j{{"command", command}, {"argv", argv}, {"seed", seed},     {"inputs", inputs},
           {"outputs", outputs}, {"version", PARGAN_VERSION},         {"wall_time_s", seconds}};
    j["config"] = config.empty() ? json(nullptr) : json(config);
    write_text(path, j.dump(2) + "\n");
  }
};

// Manifest path for a command whose primary output is a directory or a file.
std::string manifest_for_dir(const std::string& dir) { return (fs::path(dir) / "run.json").string(); }
std::string manifest_for_file(const std::string& file) { return file + ".run.json"; }

cli::RunConfig config_or_defaults(const std::string& path) {
  return path.empty() ? cli::RunConfig{} : as_usage([&] { return cli::load_config(path); });
}

Dataset load_dataset(const std::string& dir) { return as_usage([&] { return read_dataset(dir); }); }

Embedding embedding_of(const RealnessStats& st) { return Embedding(parse_embedding(st.embedding)); }

std::string basename_of(const std::string& dir) {
  auto p = fs::path(dir);
  if (p.filename().empty()) p = p.parent_path();
  return p.filename().string();
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Rows are datasets, columns their first `count` images, 2 px white gutters.
Image make_grid(const std::vector<Dataset>& rows, std::size_t count, bool draw_boxes) {
  constexpr std::int64_t kGap = 2;
  std::int64_t cell_h = 1, cell_w = 1;
  std::size_t cols = 0;
  for (const auto& r : rows) {
    cols = std::max(cols, std::min(count, r.size()));
    for (std::size_t i = 0; i < std::min(count, r.size()); ++i) {
      cell_h = std::max(cell_h, r[i].image.height), cell_w = std::max(cell_w, r[i].image.width);
    }
  }
  if (cols == 0) throw DataError("grid: no images");
  const auto n_rows = static_cast<std::int64_t>(rows.size()), n_cols = static_cast<std::int64_t>(cols);
  Image out(n_rows * cell_h + (n_rows + 1) * kGap, n_cols * cell_w + (n_cols + 1) * kGap, 1.0f);
  for (std::int64_t r = 0; r < n_rows; ++r) {
    for (std::int64_t c = 0; c < n_cols && c < static_cast<std::int64_t>(rows[r].size()); ++c) {
      const auto& s = rows[r][c];
      const std::int64_t top = kGap + r * (cell_h + kGap), left = kGap + c * (cell_w + kGap);
      for (std::int64_t y = 0; y < s.image.height; ++y)
        for (std::int64_t x = 0; x < s.image.width; ++x)
          for (int k = 0; k < 3; ++k) out.at(top + y, left + x, k) = s.image.at(y, x, k);
      if (!draw_boxes) continue;
      for (const auto& b : s.boxes) {
        const auto x0 = static_cast<std::int64_t>(b.x), y0 = static_cast<std::int64_t>(b.y);
        const auto x1 = static_cast<std::int64_t>(std::ceil(b.right())) - 1;
        const auto y1 = static_cast<std::int64_t>(std::ceil(b.bottom())) - 1;
        auto paint = [&](std::int64_t y, std::int64_t x) {
          if (y < 0 || x < 0 || y >= s.image.height || x >= s.image.width) return;
          out.at(top + y, left + x, 0) = 1, out.at(top + y, left + x, 1) = 0, out.at(top + y, left + x, 2) = 1;
        };
        for (auto x = x0; x <= x1; ++x) paint(y0, x), paint(y1, x);
        for (auto y = y0; y <= y1; ++y) paint(y, x0), paint(y, x1);
      }
    }
  }
  return out;
}

int run(const std::vector<std::string>& args);

// Parses args, runs the chosen command and writes its manifest. Returns the
// process exit code.
int dispatch(CLI::App& app, const std::vector<std::string>& args) {
  std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
  app.parse(rev);

  Manifest m;
  m.argv.assign(args.begin() + 1, args.end());
  std::string manifest_path;
  const auto t0 = std::chrono::steady_clock::now();
  auto* sub = app.get_subcommands().front();
  m.command = sub->get_name();
  auto opt = [&](const char* name) { return sub->get_option(name)->as<std::string>(); };
  auto seed_opt = sub->get_option("--seed");
  const bool seed_given = seed_opt->count() > 0;
  const auto seed = seed_given ? seed_opt->as<std::uint64_t>() : 0;
  m.seed = seed;

  if (m.command == "replay") {
    const auto path = opt("--manifest");
    const auto j = as_usage([&] {
      std::ifstream in(path);
      if (!in) throw DataError("cannot open " + path);
      try {
        return json::parse(in);
      } catch (const json::exception& e) {
        throw ParseError(std::string("bad manifest: ") + e.what(), 0);
      }
    });
    std::vector<std::string> again{args[0]};
    for (const auto& a : j.at("argv")) again.push_back(a.get<std::string>());
    if (again.size() > 1 && again[1] == "replay") throw UsageError{"usage_error", "refusing to replay a replay"};
    // Replay against the recorded config snapshot, not whatever the config
    // file holds now.
    if (j.contains("config") && j["config"].is_string()) {
      const auto snap = (fs::temp_directory_path() / ("pargan-replay-" + std::to_string(::getpid()) + ".ini")).string();
      write_text(snap, j["config"].get<std::string>());
      auto at = std::find(again.begin(), again.end(), "--config");
      if (at != again.end() && at + 1 != again.end()) {
        *(at + 1) = snap;
      } else {
        again.insert(again.end(), {"--config", snap});
      }
      const int code = run(again);
      fs::remove(snap);
      return code;
    }
    return run(again);
  }

  if (m.command == "gen-data") {
    auto cfg = config_or_defaults(opt("--config"));
    if (seed_given) cfg.data.seed = seed;
    m.seed = cfg.data.seed;
    const auto out = opt("--out");
    const auto n_test = sub->get_option("--test")->as<std::int64_t>();
    auto [src, tgt] = gen_toy_pair(cfg.data);
    write_dataset((fs::path(out) / "source").string(), src);
    write_dataset((fs::path(out) / "target").string(), tgt);
    m.outputs["source"] = (fs::path(out) / "source").string();
    m.outputs["target"] = (fs::path(out) / "target").string();
    if (n_test > 0) {
      auto tc = cfg.data;
      tc.seed = cfg.data.seed + 1000;
      tc.n_images = n_test;
      auto [ts, tt] = gen_toy_pair(tc);
      write_dataset((fs::path(out) / "source_test").string(), ts);
      write_dataset((fs::path(out) / "target_test").string(), tt);
      m.outputs["source_test"] = (fs::path(out) / "source_test").string();
      m.outputs["target_test"] = (fs::path(out) / "target_test").string();
    }
    m.config = cli::format_config(cfg);
    manifest_path = manifest_for_dir(out);
  } else if (m.command == "fit-realness") {
    const auto kind = as_usage([&] { return parse_embedding(opt("--embedding")); });
    const auto src = load_dataset(opt("--source")), tgt = load_dataset(opt("--target"));
    const auto st = fit_centers(Embedding(kind), src, tgt);
    write_stats(opt("--out"), st);
    m.inputs = {{"source", opt("--source")}, {"target", opt("--target")}};
    m.outputs = {{"stats", opt("--out")}};
    manifest_path = manifest_for_file(opt("--out"));
  } else if (m.command == "score") {
    const auto st = as_usage([&] { return read_stats(opt("--stats")); });
    auto ds = load_dataset(opt("--dataset"));
    assign_realness(st, embedding_of(st), ds);
    write_text(opt("--out"), format_scores(ds));
    m.inputs = {{"stats", opt("--stats")}, {"dataset", opt("--dataset")}};
    m.outputs = {{"scores", opt("--out")}};
    manifest_path = manifest_for_file(opt("--out"));
  } else if (m.command == "train-da") {
    auto cfg = config_or_defaults(opt("--config"));
    if (seed_given) cfg.train.seed = seed;
    m.seed = cfg.train.seed;
    const auto st = as_usage([&] { return read_stats(opt("--stats")); });
    auto src = load_dataset(opt("--source")), tgt = load_dataset(opt("--target"));
    const auto e = embedding_of(st);
    assign_realness(st, e, src);
    assign_realness(st, e, tgt);
    const auto out = opt("--out");
    if (cfg.train.checkpoint_every > 0) cfg.train.checkpoint_path = out;
    const auto every = std::max<std::int64_t>(1, cfg.train.steps / 20);
    const auto r = train_da(src, tgt, cfg.train, [&](const StepRecord& s) {
      if (s.step % every == 0 || s.step + 1 == cfg.train.steps) {
        std::fprintf(stderr, "step %lld total %.4f W %.3f/%.3f\n", static_cast<long long>(s.step), s.total,
                     s.wasserstein_fwd, s.wasserstein_inv);
      }
    });
    r.model.save(out);
    const auto losses = out + ".losses.csv";
    write_text(losses, format_loss_csv(r.log));
    if (r.skipped_steps) std::fprintf(stderr, "skipped %lld non-finite steps\n", static_cast<long long>(r.skipped_steps));
    m.config = cli::format_config(cfg);
    m.inputs = {{"source", opt("--source")}, {"target", opt("--target")}, {"stats", opt("--stats")}};
    m.outputs = {{"checkpoint", out}, {"losses", losses}};
    manifest_path = manifest_for_file(out);
  } else if (m.command == "translate") {
    const auto model = as_usage([&] { return ParGanModel<float>::from_file(opt("--ckpt")); });
    const auto ds = load_dataset(opt("--dataset"));
    const double p = sub->get_option("--p")->as<double>();
    auto r = translate_dataset(model.g, ds, p);
    for (const auto& why : r.skipped) std::fprintf(stderr, "skipped %s\n", why.c_str());
    write_dataset(opt("--out"), r.images);
    m.inputs = {{"checkpoint", opt("--ckpt")}, {"dataset", opt("--dataset")}, {"p", p}};
    m.outputs = {{"dataset", opt("--out")}, {"skipped", r.skipped.size()}};
    manifest_path = manifest_for_dir(opt("--out"));
  } else if (m.command == "pca") {
    const auto st = as_usage([&] { return read_stats(opt("--stats")); });
    const auto names = split_commas(opt("--datasets"));
    if (names.empty()) throw UsageError{"usage_error", "--datasets needs at least one directory"};
    const auto e = embedding_of(st);
    std::vector<Vec> all;
    std::vector<std::size_t> sizes;
    std::string report = "dataset,n,mean_p,centroid_to_source_center,centroid_to_target_center\n";
    for (const auto& n : names) {
      const auto ds = load_dataset(n);
      const auto v = embed_all(e, ds);
      double mp = 0;
      for (const auto& f : v) mp += realness(st, f);
      const auto c = detail::mean_of(v);
      report += basename_of(n) + "," + std::to_string(v.size()) + "," + detail::format_number(mp / v.size()) + "," +
                detail::format_number(std::sqrt(detail::sq_dist(c, st.center_s))) + "," +
                detail::format_number(std::sqrt(detail::sq_dist(c, st.center_t))) + "\n";
      all.insert(all.end(), v.begin(), v.end());
      sizes.push_back(v.size());
    }
    const auto pc = pca2(all);
    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    std::vector<cli::Series> series;
    std::size_t at = 0;
    for (std::size_t k = 0; k < names.size(); ++k) {
      cli::Series s{basename_of(names[k]), kColors[k % 6], {}};
      for (std::size_t i = 0; i < sizes[k]; ++i, ++at) s.points.push_back({pc.points[at][0], pc.points[at][1]});
      series.push_back(std::move(s));
    }
    write_text(opt("--out"), cli::scatter_svg(series, "PC1", "PC2"));
    std::fputs(report.c_str(), stdout);
    m.inputs = {{"stats", opt("--stats")}, {"datasets", names}};
    m.outputs = {{"svg", opt("--out")}};
    manifest_path = manifest_for_file(opt("--out"));
  } else if (m.command == "train-det") {
    auto cfg = config_or_defaults(opt("--config"));
    if (seed_given) cfg.detector.seed = seed;
    m.seed = cfg.detector.seed;
    const auto ds = load_dataset(opt("--dataset"));
    const auto r = train_detector(ds, cfg.detector);
    const auto out = opt("--out");
    r.model.save(out);
    std::string csv = "step,focal,box,total\n";
    for (const auto& s : r.log) {
      csv += std::to_string(s.step) + "," + detail::format_number(s.focal) + "," + detail::format_number(s.box) + "," +
             detail::format_number(s.total) + "\n";
    }
    write_text(out + ".losses.csv", csv);
    m.config = cli::format_config(cfg);
    m.inputs = {{"dataset", opt("--dataset")}};
    m.outputs = {{"checkpoint", out}, {"losses", out + ".losses.csv"}};
    manifest_path = manifest_for_file(out);
  } else if (m.command == "eval-det") {
    const auto model = as_usage([&] { return DetectorModel<float>::from_file(opt("--ckpt")); });
    const auto ds = load_dataset(opt("--dataset"));
    const auto dets = detect_dataset(model, ds);
    const auto ap = average_precision(dets, ground_truth(ds));
    write_text(opt("--out"), format_metrics({{basename_of(opt("--dataset")), ap.ap,
                                              static_cast<std::int64_t>(ds.size()), ap.n_gt}}));
    m.inputs = {{"checkpoint", opt("--ckpt")}, {"dataset", opt("--dataset")}};
    m.outputs = {{"metrics", opt("--out")}};
    if (const auto det_path = opt("--detections"); !det_path.empty()) {
      MotFrames frames;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        for (const auto& d : dets[i]) frames[static_cast<int>(i) + 1].push_back({static_cast<int>(i) + 1, -1, d.box, d.score});
      }
      write_mot_det(det_path, frames);
      m.outputs["detections"] = det_path;
    }
    std::printf("ap %s over %lld gt boxes\n", detail::format_number(ap.ap).c_str(), static_cast<long long>(ap.n_gt));
    manifest_path = manifest_for_file(opt("--out"));
  } else if (m.command == "grid") {
    const auto names = split_commas(opt("--dataset"));
    if (names.empty()) throw UsageError{"usage_error", "--dataset needs at least one directory"};
    std::vector<Dataset> rows;
    for (const auto& n : names) rows.push_back(load_dataset(n));
    const auto count = sub->get_option("--count")->as<std::size_t>();
    write_png(opt("--out"), make_grid(rows, count, sub->get_option("--boxes")->count() > 0));
    m.inputs = {{"datasets", names}};
    m.outputs = {{"png", opt("--out")}};
    manifest_path = manifest_for_file(opt("--out"));
  }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  m.write(manifest_path, secs);
  return 0;
}

void build(CLI::App& app) {
  app.set_help_flag("--help", "Print this help message and exit");
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Show help for every command");
  auto add = [&](const char* name, const char* desc) {
    auto* s = app.add_subcommand(name, desc);
    s->add_option("--seed", "Random seed (overrides the config's seed where one applies)");
    return s;
  };
  auto existing_dir = CLI::ExistingDirectory;
  auto existing_file = CLI::ExistingFile;

  auto* gen = add("gen-data", "Render the source/target toy datasets");
  gen->add_option("--config", "Config file (defaults when omitted)")->check(existing_file);
  gen->add_option("--out", "Output directory")->required();
  gen->add_option("--test", "Held-out images per domain (0 disables)")->default_val(100)->check(CLI::NonNegativeNumber);

  auto* fit = add("fit-realness", "Fit the source and target embedding centers");
  fit->add_option("--source", "Source dataset directory")->required()->check(existing_dir);
  fit->add_option("--target", "Target dataset directory")->required()->check(existing_dir);
  fit->add_option("--embedding", "pool_color_stats | random_projection | tiny_encoder")->default_val("pool_color_stats");
  fit->add_option("--out", "Stats file")->required();

  auto* score = add("score", "Rank a dataset by realness");
  score->add_option("--stats", "Stats file")->required()->check(existing_file);
  score->add_option("--dataset", "Dataset directory")->required()->check(existing_dir);
  score->add_option("--out", "CSV path")->required();

  auto* tda = add("train-da", "Train the domain-adaptation GAN");
  tda->add_option("--source", "Source dataset directory")->required()->check(existing_dir);
  tda->add_option("--target", "Target dataset directory")->required()->check(existing_dir);
  tda->add_option("--stats", "Stats file")->required()->check(existing_file);
  tda->add_option("--config", "Config file (defaults when omitted)")->check(existing_file);
  tda->add_option("--out", "Checkpoint path; losses go to <out>.losses.csv")->required();

  auto* tr = add("translate", "Map a dataset through the forward generator");
  tr->add_option("--ckpt", "GAN checkpoint")->required()->check(existing_file);
  tr->add_option("--dataset", "Dataset directory")->required()->check(existing_dir);
  tr->add_option("--p", "Conditioning realness")->default_val(1.0);
  tr->add_option("--out", "Output dataset directory")->required();

  auto* pca = add("pca", "2-D PCA scatter of dataset embeddings");
  pca->add_option("--stats", "Stats file (selects the embedding)")->required()->check(existing_file);
  pca->add_option("--datasets", "Comma-separated dataset directories")->required();
  pca->add_option("--out", "SVG path")->required();

  auto* tdet = add("train-det", "Train the detector");
  tdet->add_option("--dataset", "Labelled dataset directory")->required()->check(existing_dir);
  tdet->add_option("--config", "Config file (defaults when omitted)")->check(existing_file);
  tdet->add_option("--out", "Checkpoint path; losses go to <out>.losses.csv")->required();

  auto* edet = add("eval-det", "Average precision of a detector on a dataset");
  edet->add_option("--ckpt", "Detector checkpoint")->required()->check(existing_file);
  edet->add_option("--dataset", "Labelled dataset directory")->required()->check(existing_dir);
  edet->add_option("--out", "Metrics CSV")->required();
  edet->add_option("--detections", "Also write detections in MOT det.txt form");

  auto* grid = add("grid", "Image grid, one row per dataset");
  grid->add_option("--dataset", "Comma-separated dataset directories")->required();
  grid->add_option("--out", "PNG path")->required();
  grid->add_option("--count", "Images per row")->default_val(8)->check(CLI::PositiveNumber);
  grid->add_flag("--boxes", "Outline label boxes");

  auto* rep = add("replay", "Rerun the command recorded in a run manifest");
  rep->add_option("--manifest", "run.json written by an earlier command")->required()->check(existing_file);

  for (auto* s : app.get_subcommands({})) s->get_option("--seed")->check(CLI::NonNegativeNumber);
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Parametric domain adaptation pipeline", "pargan"};
  build(app);
  try {
    return dispatch(app, args);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (auto& c : msg) c = c == '\n' ? ' ' : c;
    std::fprintf(stderr, "error usage_error: %s\n", msg.c_str());
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error %s: %s\n", e.kind.c_str(), e.message.c_str());
    return 2;
  } catch (const pargan::Error& e) {
    std::fprintf(stderr, "error %s: %s\n", e.kind().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error runtime_error: %s\n", e.what());
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc)); }
