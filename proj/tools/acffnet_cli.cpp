#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "acffnet/acffnet.hpp"

namespace fs = std::filesystem;
using namespace acff;

namespace {

struct ModelSpec {
  std::string fusion = "add";
  std::string baseline;
  std::size_t classes = 5;
  std::size_t input = 240;

  ModelRecipe recipe() const {
    ModelRecipe r;
    if (!baseline.empty()) r.arch = std::string(to_string(parse_baseline(baseline)));
    r.fusion = parse_fusion(fusion);
    r.classes = classes;
    r.input = input;
    if (classes != r.labels.size()) r.labels.clear();
    return r;
  }
};

void add_model_options(CLI::App* cmd, ModelSpec& spec) {
  cmd->add_option("--fusion", spec.fusion, "ACFF fusion mode")
      ->check(CLI::IsMember({"add", "max", "average", "concat"}))
      ->capture_default_str();
  cmd->add_option("--baseline", spec.baseline, "build a baseline network instead of EmergencyNet")
      ->check(CLI::IsMember({"standard", "depthwise-separable", "spatially-separable"}));
  cmd->add_option("--classes", spec.classes, "number of classes")->check(CLI::Range(2, 1000))->capture_default_str();
  cmd->add_option("--input", spec.input, "input side length")->check(CLI::Range(16, 4096))->capture_default_str();
}

SplitRatios parse_ratios(const std::vector<double>& v) {
  if (v.size() != 3) throw ConfigError("--ratios takes three values: train val test");
  SplitRatios r{v[0], v[1], v[2]};
  r.validate();
  return r;
}

// Files given directly, plus sorted images within given directories.
std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file() && looks_like_image(e.path())) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      out.insert(out.end(), files.begin(), files.end());
    } else {
      if (!fs::exists(p)) throw IoError("input '" + in + "' does not exist");
      out.push_back(p);
    }
  }
  if (out.empty()) throw IoError("no images found in the given inputs");
  return out;
}

std::size_t top(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------

int run_analyze(const ModelSpec& spec, bool json) {
  const auto g = build_from_recipe<float>(spec.recipe());
  const auto report = count_params(g);
  if (json)
    std::cout << to_json(report).dump(2) << '\n';
  else
    std::cout << to_text(report);
  return 0;
}

struct TrainArgs {
  std::string data, out, log;
  std::size_t epochs = 300, batch = 64, iterations = 60;
  double lr = 0.1, l2 = 5e-4, smoothing = 0.1, pairing = 0.1, aug = 0.3;
  std::vector<double> ratios{0.5, 0.2, 0.3};
};

int run_train(const ModelSpec& spec, const TrainArgs& a, std::uint64_t seed) {
  const DatasetIndex index = index_dataset(a.data, parse_ratios(a.ratios), seed);
  for (const auto& r : index.rejected) std::cerr << "warning: skipped " << r.path.string() << ": " << r.reason << '\n';
  ModelRecipe recipe = spec.recipe();
  recipe.classes = index.num_classes();
  recipe.labels = index.class_names;
  ModelGraph<float> g = build_from_recipe<float>(recipe);
  initialize(g, seed);
  std::cout << summary(index);

  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.iterations_per_epoch = a.iterations;
  cfg.lr0 = a.lr;
  cfg.l2 = a.l2;
  cfg.label_smoothing = a.smoothing;
  cfg.pairing = a.pairing;
  cfg.seed = seed;
  cfg.augment.rotate = cfg.augment.translate = cfg.augment.mirror = cfg.augment.zoom = cfg.augment.brightness =
      cfg.augment.channel_shift = cfg.augment.blur = cfg.augment.sharpen = cfg.augment.shadow = a.aug;

  FitResult result;
  if (a.epochs > 0) {
    const FileImages images(index, recipe.input);
    result = fit(g, index, images, cfg, [](const EpochRecord& r) {
      std::cout << "epoch " << r.epoch << "  lr " << fixed(r.lr, 6) << "  loss " << fixed(r.loss) << "  val_f1 "
                << fixed(r.val_f1) << "  (" << fixed(r.seconds, 1) << " s)" << std::endl;
    });
  }
  save_weights(g, a.out);
  const fs::path log = a.log.empty() ? fs::path(a.out + ".log.tsv") : fs::path(a.log);
  std::ostringstream hist;
  write_history(hist, result.history);
  const std::string text = hist.str();
  detail::write_atomically(log, text.data(), text.size());
  if (a.epochs > 0)
    std::cout << "best val_f1 " << fixed(result.best_val_f1) << " at epoch " << result.best_epoch << ", "
              << result.images_seen << " images seen\n";
  std::cout << "wrote " << a.out << " and " << log.string() << '\n';
  return 0;
}

int run_eval(const std::string& data, const std::string& weights, const std::string& split,
             const std::vector<double>& ratios, std::uint64_t seed, bool json) {
  const ModelGraph<float> g = load_weights<float>(weights);
  const DatasetIndex index = index_dataset(data, parse_ratios(ratios), seed);
  for (const auto& r : index.rejected) std::cerr << "warning: skipped " << r.path.string() << ": " << r.reason << '\n';
  const Split s = parse_split(split);
  if (index.count(s) == 0) throw ConfigError("the " + split + " split is empty");
  const FileImages images(index, g.input_shape().h, false);
  const Evaluation e = evaluate(g, index, images, s);
  if (json) {
    auto j = to_json(e.confusion);
    j["split"] = split;
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << split << " split, " << e.confusion.total() << " images\n" << to_text(e.confusion);
  }
  return 0;
}

struct ClassifyArgs {
  std::string weights;
  std::vector<std::string> inputs;
  bool tiled = false;
  std::size_t tile = 0, overlap = 0;
  bool smooth = false;
  std::size_t window = 5;
};

int run_classify(const ClassifyArgs& a, bool json) {
  const ModelGraph<float> g = load_weights<float>(a.weights);
  const auto labels = g.labels();
  const auto files = expand_inputs(a.inputs);
  const std::size_t side = g.input_shape().h;
  nlohmann::json records = nlohmann::json::array();
  StreamSmoother smoother(a.window);
  for (const auto& f : files) {
    nlohmann::json rec{{"path", f.string()}};
    std::vector<double> probs;
    if (a.tiled) {
      const TiledPrediction t = classify_tiled(g, decode_image(f), a.tile ? a.tile : side, a.overlap);
      nlohmann::json tiles = nlohmann::json::array();
      for (const auto& tp : t.tiles) {
        const std::size_t k = top(tp.probs);
        tiles.push_back({{"y", tp.y}, {"x", tp.x}, {"label", labels[k]}, {"probability", tp.probs[k]}});
        if (!json)
          std::cout << f.string() << "\ttile " << tp.y << ',' << tp.x << '\t' << labels[k] << '\t' << fixed(tp.probs[k])
                    << '\n';
      }
      rec["tiles"] = tiles;
      probs = t.aggregate;
    } else {
      const Image img = decode_resize(f, side);
      if (a.smooth)
        probs = smoother.push(frame_output(g, img));
      else
        probs = [&] {
          const auto p = predict(g, img);
          return std::vector<double>(p.begin(), p.end());
        }();
    }
    const std::size_t k = top(probs);
    rec["label"] = labels[k];
    rec["probability"] = probs[k];
    rec["probabilities"] = probs;
    if (json)
      records.push_back(rec);
    else
      std::cout << f.string() << (a.tiled ? "\taggregate\t" : "\t") << labels[k] << '\t' << fixed(probs[k]) << '\n';
  }
  if (json) std::cout << records.dump(2) << '\n';
  return 0;
}

int run_bench(const ModelSpec& spec, const std::string& weights, const BenchOptions& opt, bool json) {
  ModelGraph<float> g;
  if (!weights.empty()) {
    g = load_weights<float>(weights);
  } else {
    g = build_from_recipe<float>(spec.recipe());
    initialize(g, opt.seed);
  }
  const BenchResult r = bench(g, opt);
  if (json) {
    std::cout << to_json(r.stats).dump(2) << '\n';
  } else {
    std::cout << "fps " << fixed(r.stats.fps, 2) << "  mean " << fixed(r.stats.mean * 1e3, 3) << " ms  median "
              << fixed(r.stats.median * 1e3, 3) << " ms  p95 " << fixed(r.stats.p95 * 1e3, 3) << " ms  ("
              << r.stats.samples << " runs, " << opt.warmup << " warmup)\n";
  }
  return 0;
}

struct ExplainArgs {
  std::string weights, image, method = "gradcam", out;
  int class_index = -1;
  bool raw = false;
};

int run_explain(const ExplainArgs& a) {
  const ModelGraph<float> g = load_weights<float>(a.weights);
  const Image original = decode_image(a.image);
  const std::size_t side = g.input_shape().h;
  Image input = resize_bilinear(original, side, side);
  clip_inplace(input);
  std::size_t cls = 0;
  if (a.method == "gradcam") {
    if (a.class_index >= 0) {
      cls = static_cast<std::size_t>(a.class_index);
    } else {
      const auto p = predict(g, input);
      cls = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    }
  }
  Tensor<float> map = a.method == "gradcam" ? grad_cam(g, input, cls) : activation_saliency(g, input);
  map = resize_bilinear(map, original.shape().h, original.shape().w);
  clip_inplace(map, 0.0f, 1.0f);
  if (a.raw) {
    for (auto& v : map.data()) v *= 255.0f;
    write_png(a.out, map);
  } else {
    write_png(a.out, colorize(map, &original));
  }
  std::cout << "wrote " << a.out;
  if (a.method == "gradcam") std::cout << " (class " << g.labels()[cls] << ")";
  std::cout << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EmergencyNet / ACFF engine"};
  app.require_subcommand(1);
  app.failure_message([](const CLI::App*, const CLI::Error& e) {
    return std::string("acffnet: error: ") + e.what() + " (see --help)\n";
  });
  std::uint64_t seed = 42;
  app.add_option("--seed", seed, "seed for every random choice")->capture_default_str();

  ModelSpec analyze_spec;
  bool analyze_json = false;
  auto* analyze = app.add_subcommand("analyze", "per-layer parameters, MACs and weight bytes");
  add_model_options(analyze, analyze_spec);
  analyze->add_flag("--json", analyze_json, "structured output");

  ModelSpec train_spec;
  TrainArgs ta;
  auto* train = app.add_subcommand("train", "balanced-batch training on a class-per-directory dataset");
  add_model_options(train, train_spec);
  train->add_option("--data", ta.data, "dataset root")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", ta.out, "checkpoint path")->required();
  train->add_option("--log", ta.log, "history log path (default <out>.log.tsv)");
  train->add_option("--epochs", ta.epochs)->capture_default_str();
  train->add_option("--batch", ta.batch)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--iterations", ta.iterations, "iterations per epoch")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--lr", ta.lr, "initial learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
  train->add_option("--l2", ta.l2)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  train->add_option("--smoothing", ta.smoothing, "label smoothing epsilon")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  train->add_option("--pairing", ta.pairing, "sample pairing probability")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  train->add_option("--aug-prob", ta.aug, "probability of each augmentation")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  train->add_option("--ratios", ta.ratios, "train val test split ratios")->expected(3)->capture_default_str();

  std::string eval_data, eval_weights, eval_split = "test";
  std::vector<double> eval_ratios{0.5, 0.2, 0.3};
  bool eval_json = false;
  auto* eval = app.add_subcommand("eval", "confusion matrix and mean F1 on a dataset split");
  eval->add_option("--data", eval_data, "dataset root")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--weights", eval_weights)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  eval->add_option("--ratios", eval_ratios, "train val test split ratios")->expected(3)->capture_default_str();
  eval->add_flag("--json", eval_json);

  ClassifyArgs ca;
  bool classify_json = false;
  auto* classify = app.add_subcommand("classify", "top-1 label per image");
  classify->add_option("--weights", ca.weights)->required()->check(CLI::ExistingFile);
  classify->add_option("inputs", ca.inputs, "image files or directories, in order")->required();
  classify->add_flag("--tiled", ca.tiled, "classify tiles of large images and aggregate");
  classify->add_option("--tile", ca.tile, "tile side (default: model input)");
  classify->add_option("--overlap", ca.overlap, "tile overlap in pixels")->capture_default_str();
  classify->add_flag("--smooth", ca.smooth, "treat inputs as a frame sequence and smooth predictions");
  classify->add_option("--window", ca.window, "smoothing window")->capture_default_str();
  classify->add_flag("--json", classify_json);

  ModelSpec bench_spec;
  std::string bench_weights;
  BenchOptions bo;
  bool bench_json = false;
  auto* benchcmd = app.add_subcommand("bench", "batch-1 inference frame rate");
  add_model_options(benchcmd, bench_spec);
  benchcmd->add_option("--weights", bench_weights, "checkpoint (default: freshly initialized model)")
      ->check(CLI::ExistingFile);
  benchcmd->add_option("--iterations", bo.iterations)->check(CLI::PositiveNumber)->capture_default_str();
  benchcmd->add_option("--warmup", bo.warmup)->capture_default_str();
  benchcmd->add_flag("--json", bench_json);

  ExplainArgs ea;
  auto* explain = app.add_subcommand("explain", "heat map of the image regions driving a prediction");
  explain->add_option("--weights", ea.weights)->required()->check(CLI::ExistingFile);
  explain->add_option("--image", ea.image)->required()->check(CLI::ExistingFile);
  explain->add_option("--method", ea.method)->check(CLI::IsMember({"gradcam", "activation"}))->capture_default_str();
  explain->add_option("--out", ea.out, "output PNG")->required();
  explain->add_option("--class", ea.class_index, "class for Grad-CAM (default: predicted)");
  explain->add_flag("--raw", ea.raw, "write the grayscale map instead of an overlay");

  std::string synth_out;
  std::size_t synth_per_class = 200, synth_size = 240;
  auto* synth = app.add_subcommand("synth", "write a synthetic five-class dataset");
  synth->add_option("--out", synth_out, "dataset root")->required();
  synth->add_option("--per-class", synth_per_class)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--size", synth_size)->check(CLI::Range(8, 4096))->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*analyze) return run_analyze(analyze_spec, analyze_json);
    if (*train) return run_train(train_spec, ta, seed);
    if (*eval) return run_eval(eval_data, eval_weights, eval_split, eval_ratios, seed, eval_json);
    if (*classify) return run_classify(ca, classify_json);
    if (*benchcmd) {
      bo.seed = seed;
      return run_bench(bench_spec, bench_weights, bo, bench_json);
    }
    if (*explain) return run_explain(ea);
    if (*synth) {
      write_synthetic(synth_out, synth_per_class, synth_size, seed);
      std::cout << "wrote " << synth_per_class * synthetic_classes << " images under " << synth_out << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "acffnet: error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "acffnet: error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
