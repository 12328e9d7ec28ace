// oaid: command-line front end for corpus generation, online training,
// matrix evaluation and the pixel-level inpainting pipeline.
//
// Exit codes: 0 success, 1 validation error (bad flags, config or inputs),
// 2 runtime failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace oaid;
using oaid::cli::RunConfig;

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  bool quiet = false;
};

void add_global_flags(CLI::App* cmd, GlobalFlags& g) {
  cmd->add_option("--config", g.config, "Run configuration JSON");
  cmd->add_option("--seed", g.seed, "Master seed");
  cmd->add_option("--out", g.out, "Output directory (or file for train pixel)");
  cmd->add_option("--threads", g.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  cmd->add_flag("--quiet", g.quiet, "Suppress JSON event lines on stderr");
}

RunConfig load(const GlobalFlags& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : cli::load_run_config(g.config);
  if (g.seed) c.seed = g.seed;
  if (!g.out.empty()) c.out = g.out;
  if (g.threads) c.threads = *g.threads;
  if (c.threads == 0) throw ValidationError("threads must be positive");
  return c;
}

void require_fresh_output(const fs::path& out) {
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out)))
    throw ValidationError("output '" + out.string() + "' already exists and is not empty");
}

// FNV-1a over relative paths and file bytes in path order.
std::string tree_hash(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) {
    all += f.generic_string();
    all.push_back('\0');
    all += detail::read_all(root / f);
  }
  return hex64(fnv1a64(all));
}

std::vector<std::string> dataset_sources(const fs::path& root, const std::vector<std::string>& requested) {
  if (!fs::is_directory(root)) throw ValidationError("pixel dataset '" + root.string() + "' does not exist");
  if (!requested.empty()) {
    for (const auto& s : requested)
      if (!fs::is_directory(root / s))
        throw ValidationError("pixel dataset '" + root.string() + "' has no source '" + s + "'");
    return requested;
  }
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) ids.push_back(e.path().filename().string());
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw ValidationError("pixel dataset '" + root.string() + "' holds no sources");
  return ids;
}

// ---------------------------------------------------------------------------

int cmd_corpus_gen(const RunConfig& c, const EventLog& log) {
  cli::require_out(c, "corpus gen");
  Manifest m = cli::resolve_manifest(c);
  if (c.seed) m.seed = *c.seed;
  require_fresh_output(*c.out);
  materialize_corpus(m, *c.out, c.threads);
  const Timeline t = build_timeline(m);
  for (const auto& w : t.warnings) log.emit("warning", {{"message", w}});
  std::printf("%-20s %6s %6s %6s\n", "source", "train", "val", "test");
  std::vector<const GeneratorSource*> all{&m.real};
  for (const auto& s : t.generated) all.push_back(&s);
  for (const auto* s : all) {
    std::printf("%-20s %6zu %6zu %6zu\n", s->id.c_str(), s->counts.train, s->counts.val, s->counts.test);
    log.emit("source_written", {{"source", s->id}, {"train", s->counts.train}, {"val", s->counts.val},
                                {"test", s->counts.test}});
  }
  const std::string hash = tree_hash(*c.out);
  std::printf("corpus_hash %s\n", hash.c_str());
  log.emit("corpus_written", {{"out", c.out->string()}, {"hash", hash}});
  return 0;
}

int cmd_train_online(const RunConfig& c, const EventLog& log) {
  cli::require_seed(c, "train online");
  cli::require_out(c, "train online");
  const Manifest m = cli::resolve_manifest(c);
  const TrainConfig tc = cli::resolve_train(c);
  const Corpus corpus(m, c.corpus, c.threads);
  const Timeline t = build_timeline(m);
  for (const auto& w : t.warnings) log.emit("warning", {{"message", w}});
  fs::create_directories(*c.out);
  const auto ckpts = run_online(t, corpus, tc, *c.out, log);
  for (const auto& k : ckpts)
    std::printf("stage %zu %s %s\n", k.stage, k.source_id.c_str(),
                (*c.out / checkpoint_filename(k.stage, k.source_id)).string().c_str());
  return 0;
}

int cmd_eval_matrix(const RunConfig& c, const fs::path& run, const EventLog& log) {
  cli::require_out(c, "eval matrix");
  const Manifest m = cli::resolve_manifest(c);
  const Timeline t = build_timeline(m);
  std::vector<fs::path> paths;
  for (std::size_t k = 1; k <= t.size(); ++k) {
    paths.push_back(run / checkpoint_filename(k, t.at_stage(k).id));
    if (!fs::exists(paths.back())) throw ValidationError("missing checkpoint '" + paths.back().string() + "'");
  }
  AugmentConfig eval = AugmentConfig::desk();
  if (c.crop_size) eval.crop_size = *c.crop_size;
  eval.validate();
  std::vector<StageCheckpoint> ckpts;
  for (const auto& p : paths) ckpts.push_back(load_checkpoint(p));
  const Corpus corpus(m, c.corpus, c.threads);
  const auto matrix = build_matrix(ckpts, t, corpus, eval, log);
  emit_reports(matrix, *c.out);

  std::printf("%-20s", "auc");
  for (std::size_t k = 1; k <= t.size(); ++k) std::printf(" %8s", ("stage_" + std::to_string(k)).c_str());
  std::printf("\n");
  for (std::size_t r = 0; r < matrix.sources.size(); ++r) {
    std::printf("%-20s", matrix.sources[r].c_str());
    for (const auto& cell : matrix.cells[r]) std::printf(" %8.4f", cell.auc);
    std::printf("\n");
  }
  std::printf("%-20s", "real_accuracy");
  for (double a : matrix.real_accuracy) std::printf(" %8.4f", a);
  std::printf("\n");
  log.emit("reports_written", {{"out", c.out->string()}});
  return 0;
}

int cmd_inpaint_gen(const RunConfig& c, const std::string& kind_name, const EventLog& log) {
  cli::require_seed(c, "inpaint gen");
  cli::require_out(c, "inpaint gen");
  const PixelProvenance kind = provenance_from_name(kind_name);
  PixelDataConfig cfg = c.pixel;
  cfg.seed = *c.seed;
  cfg.threads = c.threads;
  cfg.mask.validate();
  cfg.cutmix.validate();
  if (cfg.image_size == 0 || cfg.image_size % 8 != 0 || cfg.image_size < 32)
    throw ValidationError("pixel image_size must be a multiple of 8 and at least 32");
  if (c.pixel_sources.empty()) throw ValidationError("no pixel sources configured");
  for (const auto& s : c.pixel_sources) s.fingerprint.validate();
  require_fresh_output(*c.out);

  const fs::path staging = c.out->string() + ".partial";
  fs::remove_all(staging);
  try {
    for (const auto& src : c.pixel_sources)
      for (Split split : kAllSplits) {
        const std::size_t n = c.pixel_counts.of(split);
        if (n == 0) continue;
        save_pixel_split(make_pixel_samples(src, kind, split, n, cfg), staging, src.id, split);
        log.emit("pixel_split_written", {{"source", src.id}, {"split", split_name(split)}, {"count", n},
                                         {"kind", kind_name}});
      }
    nlohmann::json info{{"kind", kind_name}, {"seed", cfg.seed}, {"image_size", cfg.image_size}};
    for (const auto& src : c.pixel_sources)
      info["sources"].push_back({{"id", src.id}, {"fingerprint", fingerprint_to_json(src.fingerprint)}});
    detail::write_atomic(staging / "dataset.json", info.dump(2) + "\n");
    if (fs::exists(*c.out)) fs::remove(*c.out);
    fs::rename(staging, *c.out);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
  std::printf("%-20s %6s %6s %6s\n", "source", "train", "val", "test");
  for (const auto& src : c.pixel_sources)
    std::printf("%-20s %6zu %6zu %6zu\n", src.id.c_str(), c.pixel_counts.train, c.pixel_counts.val,
                c.pixel_counts.test);
  return 0;
}

int cmd_train_pixel(const RunConfig& c, const std::vector<std::string>& data,
                    const std::vector<std::string>& sources, const EventLog& log) {
  cli::require_seed(c, "train pixel");
  cli::require_out(c, "train pixel");
  if (data.empty()) throw ValidationError("train pixel needs at least one --data directory");
  PixelTrainConfig tc = c.pixel_train;
  tc.seed = *c.seed;
  tc.validate();
  if (fs::exists(*c.out)) throw ValidationError("output '" + c.out->string() + "' already exists");
  std::vector<std::pair<fs::path, std::string>> parts;
  for (const auto& d : data)
    for (const auto& s : dataset_sources(d, sources)) parts.emplace_back(d, s);

  std::vector<PixelSample> samples;
  for (const auto& [root, id] : parts) {
    auto split = load_pixel_split(root, id, Split::train);
    log.emit("pixel_data_loaded", {{"data", root.string()}, {"source", id}, {"count", split.size()}});
    for (auto& s : split) samples.push_back(std::move(s));
  }
  auto result = train_pixel_detector(samples, tc, log);
  save_model(result.model, *c.out);
  std::printf("model %s\n", c.out->string().c_str());
  std::printf("training_provenance %s\n", result.model.metadata.at("training_provenance").dump().c_str());
  return 0;
}

int cmd_eval_pixel(const RunConfig& c, const fs::path& model_path, const std::vector<std::string>& data,
                   const std::vector<std::string>& sources, const std::string& split_name_arg,
                   const EventLog& log) {
  if (data.empty()) throw ValidationError("eval pixel needs at least one --data directory");
  if (!fs::exists(model_path)) throw ValidationError("model '" + model_path.string() + "' does not exist");
  const Split split = split_from_name(split_name_arg);
  std::vector<std::pair<fs::path, std::string>> parts;
  for (const auto& d : data)
    for (const auto& s : dataset_sources(d, sources)) parts.emplace_back(d, s);
  const DetectorModel model = load_model(model_path);
  require_head(model, HeadKind::pixel, "eval pixel");

  nlohmann::json rows = nlohmann::json::array();
  std::printf("%-32s %9s %9s %9s %9s\n", "test_set", "accuracy", "precision", "recall", "f1");
  for (const auto& [root, id] : parts) {
    const auto samples = load_pixel_split(root, id, split);
    const auto m = evaluate_pixel_detector(model, samples, c.pixel_threshold);
    const std::string name = (parts.size() > 1 && data.size() > 1 ? root.filename().string() + "/" : "") + id;
    std::printf("%-32s %9.4f %9.4f %9.4f %9.4f\n", name.c_str(), m.accuracy, m.precision, m.recall, m.f1);
    rows.push_back({{"test_set", name}, {"accuracy", m.accuracy}, {"precision", m.precision},
                    {"recall", m.recall}, {"f1", m.f1}});
    log.emit("pixel_eval", rows.back());
  }
  if (c.out) {
    fs::create_directories(*c.out);
    detail::write_atomic(*c.out / "pixel_metrics.json", rows.dump(2) + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online synthetic-image detection toolkit"};
  app.require_subcommand(1);
  GlobalFlags g;

  auto* corpus = app.add_subcommand("corpus", "Corpus operations")->require_subcommand(1);
  auto* corpus_gen = corpus->add_subcommand("gen", "Materialize the synthetic corpus");
  add_global_flags(corpus_gen, g);

  auto* train = app.add_subcommand("train", "Training")->require_subcommand(1);
  auto* train_online = train->add_subcommand("online", "Progressive training over the release timeline");
  add_global_flags(train_online, g);
  auto* train_pixel = train->add_subcommand("pixel", "Train the pixel-level inpainting detector");
  add_global_flags(train_pixel, g);
  std::vector<std::string> data, sources;
  train_pixel->add_option("--data", data, "Pixel dataset root (repeatable)");
  train_pixel->add_option("--source", sources, "Restrict to these sources (repeatable)");

  auto* eval = app.add_subcommand("eval", "Evaluation")->require_subcommand(1);
  auto* eval_matrix = eval->add_subcommand("matrix", "Generalization matrix and reports");
  add_global_flags(eval_matrix, g);
  std::string run;
  eval_matrix->add_option("--run", run, "Run directory holding stage checkpoints")->required();
  auto* eval_pixel = eval->add_subcommand("pixel", "Pixel-level metrics table");
  add_global_flags(eval_pixel, g);
  std::string model_path, split = "test";
  eval_pixel->add_option("--model", model_path, "Pixel model checkpoint")->required();
  eval_pixel->add_option("--data", data, "Pixel dataset root (repeatable)");
  eval_pixel->add_option("--source", sources, "Restrict to these sources (repeatable)");
  eval_pixel->add_option("--split", split, "Split to evaluate");

  auto* inpaint = app.add_subcommand("inpaint", "Pixel-labelled data")->require_subcommand(1);
  auto* inpaint_gen = inpaint->add_subcommand("gen", "Synthesize a pixel-labelled dataset");
  add_global_flags(inpaint_gen, g);
  std::string kind = "simulated_inpaint";
  inpaint_gen->add_option("--kind", kind, "simulated_inpaint, cutmix or whole");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  const EventLog log = g.quiet ? EventLog{} : EventLog(std::cerr);
  try {
    const RunConfig c = load(g);
    if (*corpus_gen) return cmd_corpus_gen(c, log);
    if (*train_online) return cmd_train_online(c, log);
    if (*train_pixel) return cmd_train_pixel(c, data, sources, log);
    if (*eval_matrix) return cmd_eval_matrix(c, run, log);
    if (*eval_pixel) return cmd_eval_pixel(c, model_path, data, sources, split, log);
    if (*inpaint_gen) return cmd_inpaint_gen(c, kind, log);
  } catch (const ValidationError& e) {
    log.emit("error", {{"kind", "validation"}, {"message", e.what()}});
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    log.emit("error", {{"kind", "runtime"}, {"message", e.what()}});
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
