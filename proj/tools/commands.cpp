#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>

#include "geomattn/acm.hpp"
#include "geomattn/error.hpp"
#include "geomattn/grad_suite.hpp"
#include "geomattn/image.hpp"
#include "json.hpp"

namespace geomattn::cli {

namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

Dataset load_training_set(const RunConfig& cfg) {
  if (cfg.flag("data.synthetic")) return generate_synthetic_dataset(cfg.synthetic()).train;
  const std::string& dir = cfg.text("data.dir");
  if (dir.empty()) throw ConfigError("train needs --data DIR or --synthetic");
  const fs::path manifest = fs::path(dir) / "train.csv";
  if (!fs::exists(manifest)) throw DataError("training manifest not found: " + manifest.string());
  return load_manifest(manifest, cfg.count("data.image_size"));
}

std::string stem_of(const fs::path& p) { return p.stem().string(); }

}  // namespace

int cmd_generate_data(const RunConfig& cfg, const GenerateArgs& args) {
  if (args.out.empty()) throw ConfigError("generate-data needs --out DIR");
  const SyntheticDataset data = generate_synthetic_dataset(cfg.synthetic());
  write_dataset(args.out, data);
  write_text(args.out / "config.echo", cfg.echo());
  nlohmann::ordered_json j;
  j["dir"] = args.out.string();
  j["train"] = data.train.size();
  j["query"] = data.query.size();
  j["gallery"] = data.gallery.size();
  j["landmarks"] = data.landmarks.size();
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_train(const RunConfig& cfg, const TrainArgs& args) {
  const OptimConfig optim = cfg.optim();
  TrainConfig train_cfg = cfg.train();
  const Dataset train = load_training_set(cfg);
  const LabelMap labels(train);
  ReidModel model(cfg.arch(labels.size()), cfg.seed());

  fs::create_directories(args.out);
  write_text(args.out / "config.echo", cfg.echo());
  train_cfg.failure_dump = args.out / "failed_batch.gatn";
  std::ofstream log(args.out / "train.log.jsonl");
  if (!log) throw DataError("cannot write " + (args.out / "train.log.jsonl").string());

  Trainer trainer(model, train, train_cfg, optim);
  const std::size_t checkpoint_every = cfg.count("train.checkpoint_every");
  std::cerr << "training on " << train.size() << " images, " << labels.size() << " identities, "
            << trainer.steps_per_epoch() << " steps/epoch\n";
  for (std::size_t epoch = 0; epoch < optim.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const EpochLog e = trainer.train_epoch(epoch, [&](const StepLog& s) { log << to_json_line(s) << '\n'; });
    log.flush();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "epoch " << epoch + 1 << "/" << optim.epochs << " loss " << e.mean_total() << " ("
              << secs << " s)\n";
    if (checkpoint_every && (epoch + 1) % checkpoint_every == 0) model.save(args.out / "model.ckpt");
  }
  if (!log) throw DataError("failed writing the training log");
  model.save(args.out / "model.ckpt");
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const EvaluateArgs& args) {
  ReidModel model = ReidModel::load(args.checkpoint);
  const std::size_t size = model.config().input_size;
  Dataset query, gallery;
  std::string query_source, gallery_source;
  if (args.query || args.gallery) {
    if (!args.query || !args.gallery) throw ConfigError("evaluate needs both --query and --gallery");
    query = load_manifest(*args.query, size);
    gallery = load_manifest(*args.gallery, size);
    query_source = args.query->string();
    gallery_source = args.gallery->string();
  } else if (cfg.flag("data.synthetic")) {
    SyntheticSpec spec = cfg.synthetic();
    spec.image_size = size;
    SyntheticDataset data = generate_synthetic_dataset(spec);
    query = std::move(data.query);
    gallery = std::move(data.gallery);
    query_source = gallery_source = "synthetic";
  } else if (!cfg.text("data.dir").empty()) {
    const fs::path dir = cfg.text("data.dir");
    query = load_manifest(dir / "query.csv", size);
    gallery = load_manifest(dir / "gallery.csv", size);
    query_source = (dir / "query.csv").string();
    gallery_source = (dir / "gallery.csv").string();
  } else {
    throw ConfigError("evaluate needs --query and --gallery, --data DIR or --synthetic");
  }
  if (!has_tracks(gallery)) std::cerr << "warning: gallery has no track ids; tmAP is not reported\n";

  const EvalOptions options = cfg.eval();
  const FeatureTable q = extract_features(model, query);
  FeatureTable g = extract_features(model, gallery);
  MetricsReport report = evaluate_tables(q, g, options);
  report.config = {{"checkpoint", args.checkpoint.string()},
                   {"query", query_source},
                   {"gallery", gallery_source},
                   {"eval.filter_same_camera", cfg.text("eval.filter_same_camera")},
                   {"eval.max_rank", cfg.text("eval.max_rank")}};
  const std::string json = report.to_json();
  std::cout << json << '\n';
  const fs::path report_path = args.report ? *args.report : args.checkpoint.parent_path() / "metrics.json";
  write_text(report_path, json + "\n");
  if (args.per_query_csv) {
    std::ostringstream csv;
    csv.precision(17);
    csv << "query,identity,camera,ap\n";
    for (std::size_t i = 0; i < query.size(); ++i) {
      csv << query[i].name << ',' << query[i].identity << ',' << query[i].camera << ',';
      if (report.per_query_ap[i]) csv << *report.per_query_ap[i];
      csv << '\n';
    }
    write_text(*args.per_query_csv, csv.str());
  }
  return 0;
}

Tensor attention_overlay(const Tensor& image, const Tensor& mask) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::size_t mh = mask.dim(0), mw = mask.dim(1);
  auto q = mask.data();
  const auto [lo, hi] = std::minmax_element(q.begin(), q.end());
  const double range = *hi - *lo;
  auto img = image.data();
  std::vector<double> out(3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double v = q[(y * mh / h) * mw + (x * mw / w)];
      const double t = range > 0.0 ? (v - *lo) / range : 0.5;
      const double heat[3] = {t, 0.0, 1.0 - t};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        out[(ch * h + y) * w + x] = 0.5 * img[(ch * h + y) * w + x] + 0.5 * heat[ch];
      }
    }
  }
  return Tensor({3, h, w}, std::move(out));
}

int cmd_visualize_attention(const RunConfig& cfg, const VisualizeArgs& args) {
  ReidModel model = ReidModel::load(args.checkpoint);
  if (!model.config().attention_branch) throw ConfigError("checkpoint has no attentional branch to visualize");
  const std::size_t size = model.config().input_size;
  std::vector<std::string> names;
  std::vector<Tensor> images;
  if (args.manifest) {
    for (ReidSample& s : load_manifest(*args.manifest, size)) {
      names.push_back(s.name);
      images.push_back(std::move(s.image));
    }
  }
  for (const fs::path& p : args.images) {
    Tensor img = read_pnm(p);
    if (img.dim(0) == 1) {
      std::vector<double> rgb;
      for (int ch = 0; ch < 3; ++ch) rgb.insert(rgb.end(), img.data().begin(), img.data().end());
      img = Tensor({3, img.dim(1), img.dim(2)}, std::move(rgb));
    }
    names.push_back(stem_of(p));
    images.push_back(resize_bilinear(img, size, size));
  }
  if (images.empty()) throw ConfigError("visualize-attention needs --images or --manifest");

  fs::create_directories(args.out);
  write_text(args.out / "config.echo", cfg.echo());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor x = stack_images(std::span(&images[i], 1));
    const Tensor q = model.attention_map(x, Mode::eval).q;
    const Tensor mask = reshape(q, {q.dim(1), q.dim(2)});
    write_mask_pgm(args.out / (names[i] + ".mask.pgm"), mask);
    write_mask_sidecar(args.out / (names[i] + ".mask.gatn"), mask);
    write_ppm(args.out / (names[i] + ".overlay.ppm"), attention_overlay(images[i], mask));
    for (int k = 1; k < 4; ++k) {
      const Tensor rotated = rotate_image(images[i], k);
      const Tensor qr = model.attention_map(stack_images(std::span(&rotated, 1)), Mode::eval).q;
      write_ppm(args.out / (names[i] + ".rot" + std::to_string(90 * k) + ".overlay.ppm"),
                attention_overlay(rotated, reshape(qr, {qr.dim(1), qr.dim(2)})));
    }
  }
  nlohmann::ordered_json j;
  j["rotation_consistency"] = rotation_consistency(model, images);
  j["images"] = names;
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, const GradcheckArgs& args) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckOptions options;
  options.abs_tolerance = 1e-9;
  const std::vector<GradSuiteEntry> entries = run_grad_suite(cfg.seed(), options);
  double worst = 0.0;
  double worst_resolved = 0.0;
  nlohmann::ordered_json checks = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    worst = std::max(worst, e.report.max_rel_error);
    worst_resolved = std::max(worst_resolved, e.report.max_rel_error_resolved);
    nlohmann::ordered_json c;
    c["name"] = e.name;
    c["max_rel_error"] = e.report.max_rel_error;
    c["max_abs_error"] = e.report.max_abs_error;
    c["max_rel_error_above_1e-9_abs"] = e.report.max_rel_error_resolved;
    c["checked"] = e.report.checked;
    c["skipped_at_kinks"] = e.report.skipped_at_kinks;
    c["worst_parameter"] = e.report.worst_parameter;
    c["worst_index"] = e.report.worst_index;
    c["worst_analytic"] = e.report.worst_analytic;
    c["worst_numeric"] = e.report.worst_numeric;
    checks.push_back(c);
  }
  nlohmann::ordered_json j;
  j["checks"] = checks;
  j["max_rel_error"] = worst;
  j["max_rel_error_above_1e-9_abs"] = worst_resolved;
  j["tolerance"] = args.tolerance;
  j["passed"] = worst < args.tolerance;
  j["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << j.dump(2) << '\n';
  return worst < args.tolerance ? 0 : 3;
}

}  // namespace geomattn::cli
