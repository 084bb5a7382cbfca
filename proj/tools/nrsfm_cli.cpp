// nrsfm command-line tool: generate, train, reconstruct, evaluate.

#include "nrsfm/nrsfm.h"

#include <CLI11.hpp>

#include <charconv>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(nrsfm_status status, const std::string& context) {
  if (status != NRSFM_OK)
    throw Failure(context + ": " + nrsfm_status_name(status) + ": " +
                  nrsfm_last_error());
}

struct SceneDeleter {
  void operator()(nrsfm_scene* s) const { nrsfm_scene_free(s); }
};
struct ModelDeleter {
  void operator()(nrsfm_model* m) const { nrsfm_model_free(m); }
};
using ScenePtr = std::unique_ptr<nrsfm_scene, SceneDeleter>;
using ModelPtr = std::unique_ptr<nrsfm_model, ModelDeleter>;

ScenePtr load_scene(const std::string& path) {
  nrsfm_scene* s = nullptr;
  check(nrsfm_scene_load(path.c_str(), &s), "loading " + path);
  return ScenePtr(s);
}

ModelPtr load_model(const std::string& path) {
  nrsfm_model* m = nullptr;
  check(nrsfm_model_load(path.c_str(), &m), "loading " + path);
  return ModelPtr(m);
}

nrsfm_scene_info info_of(const nrsfm_scene* scene) {
  nrsfm_scene_info info{};
  check(nrsfm_scene_get_info(scene, &info), "reading scene");
  return info;
}

std::string num(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Output files created by the current command; removed when it fails.
std::vector<std::string> outputs;

void track(const std::string& path) { outputs.push_back(path); }

void write_text(const std::string& path, const std::string& text) {
  track(path);
  const std::string tmp = path + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Failure("cannot open " + tmp + " for writing");
    out << text;
    if (!out.flush()) throw Failure("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Config file: one key=value per line, '#' starts a comment.

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Failure("cannot open config file " + path);
  std::map<std::string, std::string> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Failure(path + ":" + std::to_string(line_no) + ": expected key=value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

// A training option that may come from a flag, the config file or the
// default, in that order of precedence.
struct TrainOption {
  std::string key;
  std::string value;
  CLI::Option* flag = nullptr;
};

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Failure("invalid value for " + key + ": '" + v + "'");
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw Failure("invalid value for " + key + ": '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw Failure("invalid value for " + key + ": '" + v + "'");
}

struct TrainArgs {
  std::string scene;
  std::string checkpoint;
  std::string history;
  std::string config_file;
  std::string resume;
  std::int64_t checkpoint_every = 0;
  std::int64_t stop_at = -1;
  bool quiet = false;
  std::vector<TrainOption> options;
};

void add_train_options(CLI::App* cmd, TrainArgs& a) {
  nrsfm_train_config d;
  nrsfm_train_config_default(&d);
  const std::vector<std::pair<std::string, std::string>> defaults = {
      {"layers", std::to_string(d.layers)},
      {"first-width", std::to_string(d.first_width)},
      {"last-width", std::to_string(d.last_width)},
      {"activation", d.relu ? "relu" : "soft"},
      {"translation", d.translation ? "1" : "0"},
      {"batch-size", std::to_string(d.batch_size)},
      {"steps", std::to_string(d.total_steps)},
      {"lr", num(d.base_learning_rate)},
      {"decay", num(d.decay_factor)},
      {"decay-steps", std::to_string(d.decay_steps)},
      {"seed", std::to_string(d.seed)},
      {"eval-interval", std::to_string(d.eval_interval)},
      {"renormalize", d.renormalize_dictionaries ? "1" : "0"},
      {"threads", std::to_string(d.threads)},
  };
  a.options.reserve(defaults.size());
  for (const auto& [key, value] : defaults) {
    a.options.push_back({key, value, nullptr});
    TrainOption& opt = a.options.back();
    opt.flag = cmd->add_option("--" + key, opt.value,
                               "training option (default " + value + ")");
  }
}

nrsfm_train_config resolve_config(TrainArgs& a,
                                  std::vector<std::string>& header) {
  std::map<std::string, std::string> file;
  if (!a.config_file.empty()) {
    file = read_config_file(a.config_file);
    header.push_back("config_file=" + a.config_file);
    for (const auto& [k, v] : file) header.push_back("config_file." + k + "=" + v);
  }
  std::map<std::string, std::string> value;
  for (auto& opt : a.options) {
    std::string v = opt.value;
    std::string source = "default";
    if (opt.flag->count() > 0) {
      source = "flag";
    } else if (auto it = file.find(opt.key); it != file.end()) {
      v = it->second;
      source = "file";
    }
    value[opt.key] = v;
    header.push_back(opt.key + "=" + v + " (" + source + ")");
    file.erase(opt.key);
  }
  if (!file.empty()) throw Failure("unknown config key '" + file.begin()->first + "'");

  nrsfm_train_config c;
  nrsfm_train_config_default(&c);
  c.layers = static_cast<int>(to_int("layers", value["layers"]));
  c.first_width = static_cast<int>(to_int("first-width", value["first-width"]));
  c.last_width = static_cast<int>(to_int("last-width", value["last-width"]));
  const std::string act = value["activation"];
  if (act != "relu" && act != "soft") throw Failure("activation must be relu or soft");
  c.relu = act == "relu";
  c.translation = to_bool("translation", value["translation"]);
  c.batch_size = static_cast<int>(to_int("batch-size", value["batch-size"]));
  c.total_steps = to_int("steps", value["steps"]);
  c.base_learning_rate = to_double("lr", value["lr"]);
  c.decay_factor = to_double("decay", value["decay"]);
  c.decay_steps = to_int("decay-steps", value["decay-steps"]);
  c.seed = static_cast<std::uint64_t>(to_int("seed", value["seed"]));
  c.eval_interval = to_int("eval-interval", value["eval-interval"]);
  c.renormalize_dictionaries = to_bool("renormalize", value["renormalize"]);
  c.threads = static_cast<int>(to_int("threads", value["threads"]));
  return c;
}

void print_record(const nrsfm_history_record* r, void* user) {
  if (*static_cast<bool*>(user)) return;
  std::printf("step %" PRId64 "  lr %.3e  loss %.6f  coherence %.4f", r->step,
              r->learning_rate, r->mean_loss, r->coherence);
  if (!std::isnan(r->error)) std::printf("  error %.6f", r->error);
  if (r->skipped > 0) std::printf("  skipped %" PRId64, r->skipped);
  std::printf("\n");
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenerateArgs {
  nrsfm_planted_spec spec{};
  std::string mode = "orthogonal";
  std::string out;
  std::string truth;
};

void run_generate(GenerateArgs& a) {
  if (a.mode == "orthogonal")
    a.spec.weak_perspective = 0;
  else if (a.mode == "weak")
    a.spec.weak_perspective = 1;
  else
    throw Failure("--mode must be orthogonal or weak");
  nrsfm_scene* raw = nullptr;
  nrsfm_model* truth_raw = nullptr;
  check(nrsfm_scene_generate(&a.spec, &raw, a.truth.empty() ? nullptr : &truth_raw),
        "generating scene");
  ScenePtr scene(raw);
  ModelPtr truth(truth_raw);
  track(a.out);
  check(nrsfm_scene_save(scene.get(), a.out.c_str()), "writing " + a.out);
  if (truth) {
    track(a.truth);
    check(nrsfm_model_save(truth.get(), a.truth.c_str()), "writing " + a.truth);
  }
  const auto info = info_of(scene.get());
  std::printf("wrote %s: %d points, %" PRIu64 " frames\n", a.out.c_str(),
              info.points, info.frames);
}

void run_train(TrainArgs& a) {
  ScenePtr scene = load_scene(a.scene);
  const auto info = info_of(scene.get());
  std::vector<std::string> header = {"scene=" + a.scene};
  ModelPtr model;
  if (!a.resume.empty()) {
    for (const auto& opt : a.options)
      if (opt.flag->count() > 0 && opt.key != "threads")
        throw Failure("--" + opt.key + " cannot be combined with --resume");
    if (!a.config_file.empty())
      throw Failure("--config cannot be combined with --resume");
    model = load_model(a.resume);
    header.push_back("resume=" + a.resume);
    nrsfm_train_config c;
    check(nrsfm_model_get_config(model.get(), &c), "reading checkpoint config");
    header.push_back("steps=" + std::to_string(c.total_steps) + " (checkpoint)");
    header.push_back("seed=" + std::to_string(c.seed) + " (checkpoint)");
  } else {
    const nrsfm_train_config config = resolve_config(a, header);
    if (config.translation && !info.weak_perspective)
      throw Failure("the translation model needs a weak-perspective scene");
    nrsfm_model* raw = nullptr;
    check(nrsfm_model_create(scene.get(), &config, &raw), "initializing model");
    model.reset(raw);
  }

  nrsfm_train_config config;
  check(nrsfm_model_get_config(model.get(), &config), "reading config");
  std::int64_t step = 0;
  check(nrsfm_model_get_step(model.get(), &step), "reading step");
  const std::int64_t last =
      a.stop_at >= 0 ? std::min(a.stop_at, config.total_steps) : config.total_steps;
  while (step < last) {
    const std::int64_t until =
        a.checkpoint_every > 0
            ? std::min(last, (step / a.checkpoint_every + 1) * a.checkpoint_every)
            : last;
    check(nrsfm_model_train(model.get(), scene.get(), until, print_record, &a.quiet),
          "training");
    check(nrsfm_model_get_step(model.get(), &step), "reading step");
    if (step < last) {
      track(a.checkpoint);
      check(nrsfm_model_save(model.get(), a.checkpoint.c_str()),
            "writing " + a.checkpoint);
    }
  }
  track(a.checkpoint);
  check(nrsfm_model_save(model.get(), a.checkpoint.c_str()), "writing " + a.checkpoint);
  if (!a.history.empty()) {
    std::vector<const char*> lines;
    for (const auto& h : header) lines.push_back(h.c_str());
    track(a.history);
    check(nrsfm_model_write_history(model.get(), lines.data(), lines.size(),
                                    a.history.c_str()),
          "writing " + a.history);
  }
}

struct ReconstructArgs {
  std::string scene;
  std::string checkpoint;
  std::string out;
};

void run_reconstruct(const ReconstructArgs& a) {
  ScenePtr scene = load_scene(a.scene);
  ModelPtr model = load_model(a.checkpoint);
  int points = 0;
  check(nrsfm_model_get_points(model.get(), &points), "reading checkpoint");
  const auto info = info_of(scene.get());
  if (points != info.points)
    throw Failure("scene has " + std::to_string(info.points) +
                  " points but the checkpoint expects " + std::to_string(points));
  nrsfm_scene* raw = nullptr;
  check(nrsfm_model_reconstruct(model.get(), scene.get(), &raw), "reconstructing");
  ScenePtr result(raw);
  track(a.out);
  check(nrsfm_scene_save(result.get(), a.out.c_str()), "writing " + a.out);
  std::printf("wrote %s: %" PRIu64 " frames\n", a.out.c_str(), info.frames);
}

struct EvaluateArgs {
  std::string estimates;
  std::string truth;
  std::string cumulative;
  std::string per_frame;
  std::string coherence;
  int bins = 100;
  double max_threshold = 0.5;
};

void run_evaluate(const EvaluateArgs& a) {
  if (!a.estimates.empty() || !a.truth.empty()) {
    if (a.estimates.empty() || a.truth.empty())
      throw Failure("--estimates and --truth must be given together");
    ScenePtr est = load_scene(a.estimates);
    ScenePtr truth = load_scene(a.truth);
    const auto info = info_of(truth.get());
    std::vector<double> errors(info.frames);
    double mean = 0.0;
    check(nrsfm_evaluate(est.get(), truth.get(), &mean, errors.data()), "evaluating");
    std::printf("normalized_mean_3d_error,%.6f\n", mean);
    if (!a.per_frame.empty()) {
      std::ostringstream out;
      out << "frame,error\n";
      for (std::size_t f = 0; f < errors.size(); ++f)
        out << f << ',' << num(errors[f]) << '\n';
      write_text(a.per_frame, out.str());
    }
    if (!a.cumulative.empty()) {
      if (a.bins < 1 || !(a.max_threshold > 0.0))
        throw Failure("--bins must be >= 1 and --max-threshold > 0");
      std::vector<double> thresholds(a.bins + 1), fractions(a.bins + 1);
      for (int i = 0; i <= a.bins; ++i) thresholds[i] = a.max_threshold * i / a.bins;
      check(nrsfm_cumulative_curve(est.get(), truth.get(), thresholds.data(),
                                   thresholds.size(), fractions.data()),
            "computing cumulative curve");
      std::ostringstream out;
      out << "threshold,fraction\n";
      for (std::size_t i = 0; i < thresholds.size(); ++i)
        out << num(thresholds[i]) << ',' << num(fractions[i]) << '\n';
      write_text(a.cumulative, out.str());
    }
  }
  if (!a.coherence.empty()) {
    ModelPtr model = load_model(a.coherence);
    double c = 0.0;
    check(nrsfm_model_coherence(model.get(), &c), "computing coherence");
    std::printf("coherence,%.6f\n", c);
  }
  if (a.estimates.empty() && a.coherence.empty())
    throw Failure("nothing to evaluate: give --estimates/--truth or --coherence");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised non-rigid structure from motion with deep block-sparse codes"};
  app.require_subcommand(1);

  GenerateArgs gen;
  nrsfm_planted_spec_default(&gen.spec);
  auto* g = app.add_subcommand("generate", "synthesize a planted scene");
  g->add_option("--points", gen.spec.points, "landmarks per frame");
  g->add_option("--frames", gen.spec.frames, "number of frames");
  g->add_option("--layers", gen.spec.layers, "dictionary layers");
  g->add_option("--first-width", gen.spec.first_width, "atoms in the first dictionary");
  g->add_option("--last-width", gen.spec.last_width, "atoms in the last dictionary");
  g->add_option("--code-sparsity", gen.spec.code_sparsity, "active top-level atoms");
  g->add_option("--link-sparsity", gen.spec.link_sparsity,
                "nonzeros per column of the deeper dictionaries");
  g->add_option("--mode", gen.mode, "orthogonal | weak")->check(CLI::IsMember({"orthogonal", "weak"}));
  g->add_option("--noise", gen.spec.noise_ratio, "per-frame noise ratio");
  g->add_option("--max-missing", gen.spec.max_missing, "hide 1..N points per frame");
  g->add_option("--seed", gen.spec.seed, "random seed");
  g->add_option("--out,-o", gen.out, "scene file to write")->required();
  g->add_option("--truth", gen.truth, "also write the generating model as a checkpoint");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model on a scene");
  t->add_option("--scene", tr.scene, "training scene")->required();
  t->add_option("--checkpoint,-o", tr.checkpoint, "checkpoint to write")->required();
  t->add_option("--history", tr.history, "history CSV to write");
  t->add_option("--config", tr.config_file, "key=value file with training options");
  t->add_option("--resume", tr.resume, "continue from this checkpoint");
  t->add_option("--checkpoint-every", tr.checkpoint_every,
                "also save the checkpoint every N steps");
  t->add_option("--stop-at", tr.stop_at,
                 "pause after this step; --resume continues the run");
  t->add_flag("--quiet,-q", tr.quiet, "no progress lines");
  add_train_options(t, tr);

  ReconstructArgs rc;
  std::uint64_t unused_seed = 0;
  auto* r = app.add_subcommand("reconstruct", "infer shapes and cameras");
  r->add_option("--scene", rc.scene, "input scene")->required();
  r->add_option("--checkpoint", rc.checkpoint, "trained checkpoint")->required();
  r->add_option("--out,-o", rc.out, "scene file with the estimates")->required();
  r->add_option("--seed", unused_seed, "accepted for uniformity; inference is deterministic");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "score estimates against ground truth");
  e->add_option("--estimates", ev.estimates, "scene file with estimated shapes");
  e->add_option("--truth", ev.truth, "scene file with ground-truth shapes");
  e->add_option("--cumulative", ev.cumulative, "write threshold,fraction pairs");
  e->add_option("--per-frame", ev.per_frame, "write per-frame errors");
  e->add_option("--bins", ev.bins, "cumulative curve resolution");
  e->add_option("--max-threshold", ev.max_threshold, "largest cumulative threshold");
  e->add_option("--coherence", ev.coherence, "print mutual coherence of a checkpoint");
  e->add_option("--seed", unused_seed, "accepted for uniformity; evaluation is deterministic");

  CLI11_PARSE(app, argc, argv);

  try {
    if (g->parsed()) run_generate(gen);
    if (t->parsed()) run_train(tr);
    if (r->parsed()) run_reconstruct(rc);
    if (e->parsed()) run_evaluate(ev);
  } catch (const std::exception& ex) {
    for (const auto& path : outputs) {
      std::error_code ec;
      std::filesystem::remove(path, ec);
      std::filesystem::remove(path + ".partial", ec);
    }
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}
