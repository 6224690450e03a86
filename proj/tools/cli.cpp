#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>

#include "caap/attn.hpp"
#include "caap/caap.hpp"
#include "caap/error.hpp"
#include "caap/io.hpp"
#include "caap/metrics.hpp"
#include "caap/toy.hpp"

namespace caap::cli {

namespace {

// Missing or malformed command-line input.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo: return kExitIo;
    case ErrorKind::kFormat: return kExitFormat;
    case ErrorKind::kConfig: return kExitConfig;
    case ErrorKind::kShape: return kExitShape;
    case ErrorKind::kRange: return kExitRange;
  }
  return kExitInternal;
}

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    if (c == '"' || c == '\\') {
      out += '\\';
      out += c;
    } else if (c == '\n' || c == '\r') {
      out += ' ';
    } else {
      out += c;
    }
  }
  return out;
}

int report_error(std::ostream& err, const char* kind, int code, const std::string& message) {
  err << "error: kind=" << kind << " exit=" << code << " message=\"" << escape(message) << "\"\n";
  return code;
}

// Flag values win over the --config file, which wins over built-in defaults.
class Settings {
 public:
  void load(const std::optional<std::string>& path, const CLI::App& cmd) {
    if (!path) return;
    path_ = *path;
    config_ = read_json_file(*path);
    if (!config_.is_object()) throw Error(ErrorKind::kConfig, *path + ": config file must hold a JSON object");
    for (const auto& item : config_.items()) {
      if (item.key() == "config" || cmd.get_option_no_throw("--" + item.key()) == nullptr) {
        throw Error(ErrorKind::kConfig,
                    *path + ": unknown key \"" + item.key() + "\" for command " + cmd.get_name());
      }
    }
  }

  template <typename T>
  std::optional<T> find(const std::optional<T>& flag, const std::string& key) const {
    if (flag) return flag;
    if (!config_.contains(key)) return std::nullopt;
    try {
      return config_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw Error(ErrorKind::kConfig, path_ + ": key \"" + key + "\" has the wrong type");
    }
  }

  template <typename T>
  T get(const std::optional<T>& flag, const std::string& key, T fallback) const {
    return find(flag, key).value_or(std::move(fallback));
  }

  template <typename T>
  T require(const std::optional<T>& flag, const std::string& key) const {
    auto v = find(flag, key);
    if (!v) throw UsageError("missing --" + key);
    return *v;
  }

  /// Repeatable flag; the config file may give a string or a list.
  std::vector<std::string> list(const std::vector<std::string>& flag, const std::string& key) const {
    if (!flag.empty() || !config_.contains(key)) return flag;
    const Json& v = config_.at(key);
    if (v.is_string()) return {v.get<std::string>()};
    try {
      return v.get<std::vector<std::string>>();
    } catch (const Json::exception&) {
      throw Error(ErrorKind::kConfig, path_ + ": key \"" + key + "\" has the wrong type");
    }
  }

 private:
  Json config_ = Json::object();
  std::string path_;
};

struct Common {
  std::optional<std::string> config;
  std::optional<int> threads;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON object of flag defaults (keys are long flag names)");
  cmd->add_option("--threads", c.threads, "worker threads; falls back to CAAP_THREADS, then 1");
  cmd->add_option("--out", c.out, "output file");
}

int resolve_threads(const Settings& s, const std::optional<int>& flag) {
  int threads = 1;
  if (auto t = s.find(flag, "threads")) {
    threads = *t;
  } else if (const char* env = std::getenv("CAAP_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0') throw Error(ErrorKind::kConfig, "CAAP_THREADS is not an integer: '" + std::string(env) + "'");
    threads = static_cast<int>(v);
  }
  if (threads < 1) throw Error(ErrorKind::kConfig, "thread count must be at least 1, got " + std::to_string(threads));
  return threads;
}

std::string run_config_comment(const Json& rc) { return "run_config " + rc.dump(); }

std::string with_run_config(const Json& rc, const std::string& body) {
  return "# " + run_config_comment(rc) + "\n" + body;
}

void write_output(std::ostream& out, const std::string& path, const std::string& content) {
  write_file(path, content);
  out << "wrote " << path << "\n";
}

// ---------------------------------------------------------------- attribution setup

struct AttrFlags {
  std::optional<std::string> model, image, blank, mode, select, layers;
  std::optional<std::uint64_t> seed;
  std::optional<float> sigma;
  std::optional<int> kernel, class_id;
};

void add_attr(CLI::App* cmd, AttrFlags& f) {
  cmd->add_option("--model", f.model, "VITW1 model file");
  cmd->add_option("--image", f.image, "source image (PNG or P2)");
  cmd->add_option("--blank", f.blank, "black|white|mean|noisy|blurnoisy (default white)");
  cmd->add_option("--seed", f.seed, "noise seed for noisy blanks (default 0)");
  cmd->add_option("--sigma", f.sigma, "noise standard deviation (default 0.15)");
  cmd->add_option("--kernel", f.kernel, "odd box-blur width for blurnoisy (default 5)");
  cmd->add_option("--class", f.class_id, "class to attribute (default: predicted class)");
  cmd->add_option("--mode", f.mode, "naive|parallel|approx|input-insert|input-delete (default parallel)");
  cmd->add_option("--select", f.select, "nopad|box1|box2|manhattan1 (default box1)");
  cmd->add_option("--layers", f.layers, "auto or a..b, 1-based inclusive (default auto)");
}

struct Attribution {
  std::string model_path, image_path;
  ModelBundle model;
  Image x, x0;
  AttributionMode mode = AttributionMode::kParallel;
  PatchRequest request;
};

int predicted_class(const ActivationCache& cache) {
  Eigen::Index k = 0;
  cache.probs.maxCoeff(&k);
  return static_cast<int>(k);
}

Attribution resolve_attribution(const Settings& s, const AttrFlags& f) {
  Attribution a;
  a.model_path = s.require(f.model, "model");
  a.image_path = s.require(f.image, "image");
  a.model = load_model(a.model_path);
  a.x = load_image(a.image_path);
  BlankSpec blank = BlankSpec::of(BlankSpec::parse_kind(s.get(f.blank, "blank", std::string("white"))));
  blank.seed = s.get(f.seed, "seed", blank.seed);
  blank.sigma = s.get(f.sigma, "sigma", blank.sigma);
  blank.kernel = s.get(f.kernel, "kernel", blank.kernel);
  a.request.blank = blank;
  a.mode = parse_mode(s.get(f.mode, "mode", std::string("parallel")));
  a.request.select = SelectionOp::parse(s.get(f.select, "select", std::string("box1")));
  a.request.range = LayerRange::parse(s.get(f.layers, "layers", std::string("auto")), a.model.config.layers);
  a.x0 = make_blank(blank, a.x.width, a.x.height, a.x.channels);
  if (auto y = s.find(f.class_id, "class")) {
    a.request.class_id = *y;
  } else {
    a.request.class_id = predicted_class(forward_full(a.model, a.x));
  }
  check_request(a.model, a.request);
  return a;
}

Json attribution_config(const char* command, const Attribution& a) {
  return Json{{"command", command},
              {"model", a.model_path},
              {"model_fingerprint", to_hex(a.model.fingerprint())},
              {"image", a.image_path},
              {"blank", blank_to_json(a.request.blank)},
              {"class", a.request.class_id},
              {"mode", to_string(a.mode)},
              {"select", a.request.select.name()},
              {"layers", {a.request.range.start, a.request.range.end}}};
}

std::span<const float> scores_of(const AttributionMap& map) {
  return {map.scores.data(), static_cast<std::size_t>(map.scores.size())};
}

// ---------------------------------------------------------------- gen-model

struct GenModelFlags {
  Common common;
  std::optional<std::uint64_t> seed;
  std::optional<int> depth, dim, heads, grid, patch_px, classes, channels;
  std::optional<float> mlp_ratio, weight_scale;
};

void add_gen_model(CLI::App* cmd, GenModelFlags& f) {
  add_common(cmd, f.common);
  cmd->add_option("--seed", f.seed, "generator seed (default 7)");
  cmd->add_option("--depth", f.depth, "number of blocks L (default 6)");
  cmd->add_option("--dim", f.dim, "embedding width (default 32)");
  cmd->add_option("--heads", f.heads, "attention heads (default 4)");
  cmd->add_option("--grid", f.grid, "patches per side (default 4)");
  cmd->add_option("--patch-px", f.patch_px, "patch side in pixels (default 4)");
  cmd->add_option("--classes", f.classes, "number of classes (default 5)");
  cmd->add_option("--channels", f.channels, "image channels, 1 or 3 (default 3)");
  cmd->add_option("--mlp-ratio", f.mlp_ratio, "MLP width over embedding width (default 2)");
  cmd->add_option("--weight-scale", f.weight_scale, "weight std times sqrt(dim) (default 1)");
}

ToySpec toy_spec(const Settings& s, const GenModelFlags& f) {
  ToySpec spec;
  spec.seed = s.get(f.seed, "seed", spec.seed);
  ViTConfig& c = spec.config;
  c.layers = s.get(f.depth, "depth", c.layers);
  c.dim = s.get(f.dim, "dim", c.dim);
  c.heads = s.get(f.heads, "heads", c.heads);
  c.grid = s.get(f.grid, "grid", c.grid);
  c.patch_px = s.get(f.patch_px, "patch-px", c.patch_px);
  c.classes = s.get(f.classes, "classes", c.classes);
  c.channels = s.get(f.channels, "channels", c.channels);
  c.mlp_ratio = s.get(f.mlp_ratio, "mlp-ratio", c.mlp_ratio);
  spec.weight_scale = s.get(f.weight_scale, "weight-scale", spec.weight_scale);
  c.validate();
  return spec;
}

void cmd_gen_model(const Settings& s, const GenModelFlags& f, std::ostream& out) {
  const std::string path = s.require(f.common.out, "out");
  const ToySpec spec = toy_spec(s, f);
  const ModelBundle model = gen_model(spec);
  const Json rc{{"command", "gen-model"},
                {"seed", spec.seed},
                {"config", config_to_json(spec.config)},
                {"weight_scale", spec.weight_scale},
                {"out", path}};
  save_model(path, model, Json{{"run_config", rc}});
  out << "wrote " << path << " fingerprint=" << to_hex(model.fingerprint()) << "\n";
}

// ---------------------------------------------------------------- gen-planted

struct GenPlantedFlags {
  GenModelFlags geometry;
  std::optional<std::string> model, blank_out, mask_out;
  std::optional<int> patch;
};

void add_gen_planted(CLI::App* cmd, GenPlantedFlags& f) {
  add_gen_model(cmd, f.geometry);
  cmd->add_option("--model", f.model, "take the image geometry from this model instead of the geometry flags");
  cmd->add_option("--patch", f.patch, "index of the patch holding the planted texture");
  cmd->add_option("--blank-out", f.blank_out, "also write the white blank image");
  cmd->add_option("--mask-out", f.mask_out, "also write the planted patch as a mask");
}

void cmd_gen_planted(const Settings& s, const GenPlantedFlags& f, std::ostream& out) {
  const std::string path = s.require(f.geometry.common.out, "out");
  ToySpec spec = toy_spec(s, f.geometry);
  const auto model_path = s.find(f.model, "model");
  if (model_path) spec.config = load_model(*model_path).config;
  const int patch = s.require(f.patch, "patch");
  const auto [x, x0] = gen_planted_pair(spec, patch);
  const Json rc{{"command", "gen-planted"},
                {"seed", spec.seed},
                {"model", model_path ? Json(*model_path) : Json(nullptr)},
                {"grid", spec.config.grid},
                {"patch_px", spec.config.patch_px},
                {"channels", spec.config.channels},
                {"patch", patch}};
  const std::vector<std::string> comments{run_config_comment(rc)};
  save_image(path, x, comments);
  out << "wrote " << path << "\n";
  if (auto p = s.find(f.blank_out, "blank-out")) {
    save_image(*p, x0, comments);
    out << "wrote " << *p << "\n";
  }
  if (auto p = s.find(f.mask_out, "mask-out")) {
    Image mask(x.height, x.width, 1, 0.0f);
    fill_patch(mask, patch, spec.config.patch_px, 1.0f);
    save_image(*p, mask, comments);
    out << "wrote " << *p << "\n";
  }
}

// ---------------------------------------------------------------- attribute

struct AttributeFlags {
  Common common;
  AttrFlags attr;
  std::optional<std::string> heatmap;
};

void cmd_attribute(const Settings& s, const AttributeFlags& f, std::ostream& out) {
  const std::string path = s.require(f.common.out, "out");
  const int threads = resolve_threads(s, f.common.threads);
  const Attribution a = resolve_attribution(s, f.attr);
  MapFile file;
  file.map = attribute(a.model, a.x, a.x0, a.mode, a.request, threads);
  file.run_config = attribution_config("attribute", a);
  const auto heatmap = s.find(f.heatmap, "heatmap");
  file.run_config["out"] = path;
  file.run_config["heatmap"] = heatmap ? Json(*heatmap) : Json(nullptr);
  write_map_file(path, file);
  out << "wrote " << path << "\n";
  if (heatmap) {
    write_output(out, *heatmap,
                 render_heatmap(file.map, a.model.config.patch_px, {run_config_comment(file.run_config)}));
  }
}

// ---------------------------------------------------------------- eval

struct EvalFlags {
  Common common;
  std::optional<std::string> map, model, image, mask, metrics, json, del_curve, ins_curve;
  std::optional<float> reference;
  std::optional<int> blur_kernel;
};

const std::vector<std::string> kAllMetrics{"del", "ins", "aupr", "pg", "entropy", "gini"};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::string cur;
  for (char c : text + ",") {
    if (c == ',') {
      if (!cur.empty()) items.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  return items;
}

bool wants(const std::vector<std::string>& list, const std::string& name) {
  return std::find(list.begin(), list.end(), name) != list.end();
}

SegMask checked_mask(const std::string& path, int side) {
  SegMask mask = load_mask(path);
  if (mask.height != side || mask.width != side) {
    throw Error(ErrorKind::kShape, path + ": mask is " + std::to_string(mask.height) + "x" +
                                       std::to_string(mask.width) + ", expected " + std::to_string(side) + "x" +
                                       std::to_string(side));
  }
  return mask;
}

void cmd_eval(const Settings& s, const EvalFlags& f, std::ostream& out) {
  const int threads = resolve_threads(s, f.common.threads);
  const std::string map_path = s.require(f.map, "map");
  const MapFile file = read_map_file(map_path);
  const AttributionMap& map = file.map;
  const auto model_path = s.find(f.model, "model");
  const auto image_path = s.find(f.image, "image");
  const auto mask_path = s.find(f.mask, "mask");

  std::vector<std::string> metrics;
  if (auto list = s.find(f.metrics, "metrics")) {
    metrics = split_list(*list);
    for (const auto& m : metrics) {
      if (!wants(kAllMetrics, m)) throw Error(ErrorKind::kConfig, "unknown metric '" + m + "'");
    }
  } else {
    for (const auto& m : kAllMetrics) {
      const bool curve = m == "del" || m == "ins";
      const bool local = m == "aupr" || m == "pg";
      if ((curve && !(model_path && image_path)) || (local && !mask_path)) continue;
      metrics.push_back(m);
    }
  }
  const bool curves = wants(metrics, "del") || wants(metrics, "ins");
  const bool local = wants(metrics, "aupr") || wants(metrics, "pg");
  if (curves && !(model_path && image_path)) throw UsageError("del/ins metrics need --model and --image");
  if (local && !mask_path) throw UsageError("aupr/pg metrics need --mask");

  Json rc{{"command", "eval"}, {"map", map_path}, {"metrics", metrics}};
  MetricReport report;
  const std::span<const float> scores = scores_of(map);
  std::optional<PerturbationCurve> del, ins;
  if (curves) {
    const ModelBundle model = load_model(*model_path);
    if (model.fingerprint() != map.model_fingerprint) {
      throw Error(ErrorKind::kConfig, *model_path + " is not the model the map was computed with");
    }
    if (model.config.grid != map.grid) throw Error(ErrorKind::kShape, "map grid does not match the model grid");
    const Image x = load_image(*image_path);
    const float reference = s.get(f.reference, "reference", 0.5f);
    int kernel = s.get(f.blur_kernel, "blur-kernel", 0);
    if (kernel == 0) kernel = default_blur_kernel(model.config.patch_px);
    rc["model"] = *model_path;
    rc["image"] = *image_path;
    rc["class"] = map.class_id;
    rc["reference"] = reference;
    rc["blur_kernel"] = kernel;
    const ClassScorer score = class_probability(model, map.class_id);
    if (wants(metrics, "del")) {
      del = deletion_curve(score, x, scores, map.grid, reference, threads);
      report.del_auc = del->auc();
    }
    if (wants(metrics, "ins")) {
      ins = insertion_curve(score, x, scores, map.grid, kernel, threads);
      report.ins_auc = ins->auc();
    }
  }
  if (local) {
    rc["mask"] = *mask_path;
    const SegMask mask = load_mask(*mask_path);
    if (wants(metrics, "aupr")) {
      report.aupr1 = aupr(scores, map.grid, mask, Polarity::kForeground);
      report.aupr0 = aupr(scores, map.grid, mask, Polarity::kBackground);
    }
    if (wants(metrics, "pg")) report.pg_hit = pointing_game(scores, map.grid, mask);
  }
  const std::vector<double> raw(scores.begin(), scores.end());
  if (wants(metrics, "entropy")) report.entropy = entropy_norm(raw);
  if (wants(metrics, "gini")) report.gini = gini(raw);
  report.finalize();

  const auto out_path = s.find(f.common.out, "out");
  const auto json_path = s.find(f.json, "json");
  const auto del_path = s.find(f.del_curve, "del-curve");
  const auto ins_path = s.find(f.ins_curve, "ins-curve");
  rc["out"] = out_path ? Json(*out_path) : Json(nullptr);
  rc["json"] = json_path ? Json(*json_path) : Json(nullptr);
  rc["del_curve"] = del_path ? Json(*del_path) : Json(nullptr);
  rc["ins_curve"] = ins_path ? Json(*ins_path) : Json(nullptr);

  const std::string text = with_run_config(rc, report.to_text());
  if (out_path) {
    write_output(out, *out_path, text);
  } else {
    out << text;
  }
  if (json_path) {
    Json values = Json::object();
    for (const auto& [k, v] : report.entries()) values[k] = v;
    write_output(out, *json_path, Json{{"run_config", rc}, {"metrics", values}}.dump(2) + "\n");
  }
  if (del_path) {
    if (!del) throw UsageError("--del-curve needs the del metric");
    write_output(out, *del_path, with_run_config(rc, del->to_csv()));
  }
  if (ins_path) {
    if (!ins) throw UsageError("--ins-curve needs the ins metric");
    write_output(out, *ins_path, with_run_config(rc, ins->to_csv()));
  }
}

// ---------------------------------------------------------------- ablate

struct AblateFlags {
  Common common;
  AttrFlags attr;
  std::optional<std::string> axis, mask;
  std::optional<float> reference;
  std::optional<int> blur_kernel;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void cmd_ablate(const Settings& s, const AblateFlags& f, std::ostream& out) {
  const std::string path = s.require(f.common.out, "out");
  const int threads = resolve_threads(s, f.common.threads);
  const std::string axis = s.require(f.axis, "axis");
  if (axis != "blank" && axis != "select" && axis != "layers") {
    throw Error(ErrorKind::kConfig, "unknown ablation axis '" + axis + "' (blank, select or layers)");
  }
  const Attribution a = resolve_attribution(s, f.attr);
  const ViTConfig& c = a.model.config;
  const float reference = s.get(f.reference, "reference", 0.5f);
  int kernel = s.get(f.blur_kernel, "blur-kernel", 0);
  if (kernel == 0) kernel = default_blur_kernel(c.patch_px);
  const auto mask_path = s.find(f.mask, "mask");
  std::optional<SegMask> mask;
  if (mask_path) mask = checked_mask(*mask_path, c.image_side());

  std::vector<std::string> values;
  if (axis == "blank") values = {"black", "white", "mean", "noisy", "blurnoisy"};
  if (axis == "select") values = {"nopad", "box1", "box2", "manhattan1"};
  if (axis == "layers") {
    for (int cut = 1; cut <= c.layers; ++cut) values.push_back("1.." + std::to_string(cut));
  }

  Json rc = attribution_config("ablate", a);
  rc["axis"] = axis;
  rc["values"] = values;
  rc["mask"] = mask_path ? Json(*mask_path) : Json(nullptr);
  rc["reference"] = reference;
  rc["blur_kernel"] = kernel;
  rc["out"] = path;

  const ClassScorer score = class_probability(a.model, a.request.class_id);
  std::string table = "axis,value,del_auc,ins_auc,ins_minus_del";
  if (mask) table += ",aupr1,aupr0,pg_hit";
  table += "\n";
  for (const auto& value : values) {
    PatchRequest req = a.request;
    Image x0 = a.x0;
    if (axis == "blank") {
      req.blank.kind = BlankSpec::parse_kind(value);
      x0 = make_blank(req.blank, a.x.width, a.x.height, a.x.channels);
    } else if (axis == "select") {
      req.select = SelectionOp::parse(value);
    } else {
      req.range = LayerRange::parse(value, c.layers);
    }
    const AttributionMap map = attribute(a.model, a.x, x0, a.mode, req, threads);
    const double del = deletion_curve(score, a.x, scores_of(map), c.grid, reference, threads).auc();
    const double ins = insertion_curve(score, a.x, scores_of(map), c.grid, kernel, threads).auc();
    table += axis + "," + value + "," + fmt(del) + "," + fmt(ins) + "," + fmt(ins - del);
    if (mask) {
      table += "," + fmt(aupr(scores_of(map), c.grid, *mask, Polarity::kForeground)) + "," +
               fmt(aupr(scores_of(map), c.grid, *mask, Polarity::kBackground)) + "," +
               std::to_string(pointing_game(scores_of(map), c.grid, *mask));
    }
    table += "\n";
  }
  write_output(out, path, with_run_config(rc, table));
}

// ---------------------------------------------------------------- attn-stats

struct AttnFlags {
  Common common;
  std::optional<std::string> model, image;
  std::vector<std::string> masks;
};

void cmd_attn_stats(const Settings& s, const AttnFlags& f, std::ostream& out) {
  const std::string path = s.require(f.common.out, "out");
  resolve_threads(s, f.common.threads);  // validated; the statistics are computed serially
  const std::string model_path = s.require(f.model, "model");
  const std::string image_path = s.require(f.image, "image");
  const std::vector<std::string> mask_paths = s.list(f.masks, "mask");
  if (mask_paths.empty()) throw UsageError("missing --mask");
  const ModelBundle model = load_model(model_path);
  const ActivationCache cache = forward_full(model, load_image(image_path));
  std::vector<SegMask> masks;
  for (const auto& p : mask_paths) masks.push_back(load_mask(p));
  const AttnGroupStats stats = attention_group_stats(model, cache, masks);
  const Json rc{{"command", "attn-stats"},
                {"model", model_path},
                {"model_fingerprint", to_hex(model.fingerprint())},
                {"image", image_path},
                {"mask", mask_paths},
                {"out", path}};
  write_output(out, path, with_run_config(rc, stats.to_csv()));
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Patch attribution for vision transformers by activation patching", "caap"};
  app.require_subcommand(1);

  GenModelFlags gen_model_flags;
  CLI::App* gen_model_cmd = app.add_subcommand("gen-model", "write a seeded toy model (VITW1)");
  add_gen_model(gen_model_cmd, gen_model_flags);

  GenPlantedFlags planted_flags;
  CLI::App* planted_cmd = app.add_subcommand("gen-planted", "write a planted-texture image and its white blank");
  add_gen_planted(planted_cmd, planted_flags);

  AttributeFlags attribute_flags;
  CLI::App* attribute_cmd = app.add_subcommand("attribute", "compute an attribution map");
  add_common(attribute_cmd, attribute_flags.common);
  add_attr(attribute_cmd, attribute_flags.attr);
  attribute_cmd->add_option("--heatmap", attribute_flags.heatmap, "also write a P2 heat grid");

  EvalFlags eval_flags;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a map (faithfulness, localization, compactness)");
  add_common(eval_cmd, eval_flags.common);
  eval_cmd->add_option("--map", eval_flags.map, "map document written by attribute");
  eval_cmd->add_option("--model", eval_flags.model, "model for deletion/insertion");
  eval_cmd->add_option("--image", eval_flags.image, "source image for deletion/insertion");
  eval_cmd->add_option("--mask", eval_flags.mask, "foreground mask for aupr/pg");
  eval_cmd->add_option("--metrics", eval_flags.metrics, "comma list of del,ins,aupr,pg,entropy,gini");
  eval_cmd->add_option("--reference", eval_flags.reference, "deletion fill value (default 0.5)");
  eval_cmd->add_option("--blur-kernel", eval_flags.blur_kernel, "odd insertion blur width (default 2*patch_px+1)");
  eval_cmd->add_option("--json", eval_flags.json, "also write the report as JSON");
  eval_cmd->add_option("--del-curve", eval_flags.del_curve, "write the deletion curve CSV");
  eval_cmd->add_option("--ins-curve", eval_flags.ins_curve, "write the insertion curve CSV");

  AblateFlags ablate_flags;
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "attribute and score along one design axis");
  add_common(ablate_cmd, ablate_flags.common);
  add_attr(ablate_cmd, ablate_flags.attr);
  ablate_cmd->add_option("--axis", ablate_flags.axis, "blank, select or layers");
  ablate_cmd->add_option("--mask", ablate_flags.mask, "foreground mask; adds aupr1, aupr0 and pg_hit columns");
  ablate_cmd->add_option("--reference", ablate_flags.reference, "deletion fill value (default 0.5)");
  ablate_cmd->add_option("--blur-kernel", ablate_flags.blur_kernel, "odd insertion blur width (default 2*patch_px+1)");

  AttnFlags attn_flags;
  CLI::App* attn_cmd = app.add_subcommand("attn-stats", "per-layer attention grouping statistics");
  add_common(attn_cmd, attn_flags.common);
  attn_cmd->add_option("--model", attn_flags.model, "VITW1 model file");
  attn_cmd->add_option("--image", attn_flags.image, "image to run");
  attn_cmd->add_option("--mask", attn_flags.masks, "object mask; repeat for several objects");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    return report_error(err, "usage", kExitUsage, e.what());
  }

  try {
    Settings settings;
    if (gen_model_cmd->parsed()) {
      settings.load(gen_model_flags.common.config, *gen_model_cmd);
      cmd_gen_model(settings, gen_model_flags, out);
    } else if (planted_cmd->parsed()) {
      settings.load(planted_flags.geometry.common.config, *planted_cmd);
      cmd_gen_planted(settings, planted_flags, out);
    } else if (attribute_cmd->parsed()) {
      settings.load(attribute_flags.common.config, *attribute_cmd);
      cmd_attribute(settings, attribute_flags, out);
    } else if (eval_cmd->parsed()) {
      settings.load(eval_flags.common.config, *eval_cmd);
      cmd_eval(settings, eval_flags, out);
    } else if (ablate_cmd->parsed()) {
      settings.load(ablate_flags.common.config, *ablate_cmd);
      cmd_ablate(settings, ablate_flags, out);
    } else if (attn_cmd->parsed()) {
      settings.load(attn_flags.common.config, *attn_cmd);
      cmd_attn_stats(settings, attn_flags, out);
    }
  } catch (const UsageError& e) {
    return report_error(err, "usage", kExitUsage, e.what());
  } catch (const Error& e) {
    return report_error(err, to_string(e.kind()), exit_code(e.kind()), e.what());
  } catch (const std::exception& e) {
    return report_error(err, "internal", kExitInternal, e.what());
  }
  return kExitOk;
}

}  // namespace caap::cli
