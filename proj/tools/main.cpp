#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"
#include "geomattn/error.hpp"
#include "run_config.hpp"

namespace {

using namespace geomattn;
using namespace geomattn::cli;

struct CommonOptions {
  std::optional<std::string> config_file;
  std::vector<std::string> sets;
  std::optional<std::string> preset;
  std::optional<std::string> seed;
  std::optional<std::string> data;
  bool synthetic = false;
  std::optional<std::string> ids;
  std::optional<std::string> epochs;
  std::optional<std::string> lambda_rot;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_file, "key = value config file (a config.echo replays a run)");
  cmd->add_option("--set", o.sets, "Override a config key, e.g. --set optim.lr0=1e-4")->take_all();
  cmd->add_option("--preset", o.preset, "desk, veri or vehicleid");
  cmd->add_option("--seed", o.seed, "Random seed (falls back to GEOMATTN_SEED)");
  cmd->add_option("--data", o.data, "Dataset directory with train.csv, query.csv, gallery.csv");
  cmd->add_flag("--synthetic", o.synthetic, "Use the built-in synthetic vehicle set");
  cmd->add_option("--ids", o.ids, "Number of synthetic identities");
  cmd->add_option("--epochs", o.epochs, "Training epochs");
  cmd->add_option("--lambda-rot", o.lambda_rot, "Weight of the rotation loss");
}

RunConfig resolve(const CommonOptions& o) {
  std::vector<Assignment> file;
  if (o.config_file) file = read_config_file(*o.config_file);
  std::vector<Assignment> overrides;
  for (const auto& s : o.sets) overrides.push_back(parse_assignment(s));
  if (o.preset) overrides.emplace_back("preset", *o.preset);
  if (o.seed) overrides.emplace_back("seed", *o.seed);
  if (o.data) overrides.emplace_back("data.dir", *o.data);
  if (o.synthetic) overrides.emplace_back("data.synthetic", "true");
  if (o.ids) overrides.emplace_back("synthetic.ids", *o.ids);
  if (o.epochs) overrides.emplace_back("optim.epochs", *o.epochs);
  if (o.lambda_rot) overrides.emplace_back("loss.rot", *o.lambda_rot);
  std::optional<std::string> env_seed;
  if (const char* s = std::getenv("GEOMATTN_SEED")) env_seed = s;
  return RunConfig::resolve(file, overrides, env_seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vehicle re-identification with geometric attention and rotation self-supervision"};
  app.require_subcommand(1);

  CommonOptions common;
  GenerateArgs generate;
  TrainArgs train;
  EvaluateArgs evaluate;
  VisualizeArgs visualize;
  GradcheckArgs gradcheck;

  auto* gen_cmd = app.add_subcommand("generate-data", "Write the synthetic dataset to a directory");
  add_common(gen_cmd, common);
  gen_cmd->add_option("--out", generate.out, "Output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model; writes model.ckpt, train.log.jsonl, config.echo");
  add_common(train_cmd, common);
  train_cmd->add_option("--out", train.out, "Output directory");

  auto* eval_cmd = app.add_subcommand("evaluate", "Retrieval metrics of a checkpoint as JSON on stdout");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", evaluate.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--query", evaluate.query, "Query manifest");
  eval_cmd->add_option("--gallery", evaluate.gallery, "Gallery manifest");
  eval_cmd->add_option("--out", evaluate.report, "Report path (default: metrics.json next to the checkpoint)");
  eval_cmd->add_option("--per-query-csv", evaluate.per_query_csv, "Write per-query AP as CSV");

  auto* vis_cmd = app.add_subcommand("visualize-attention", "Attention masks and overlays for images");
  add_common(vis_cmd, common);
  vis_cmd->add_option("--checkpoint", visualize.checkpoint, "Model checkpoint")->required();
  vis_cmd->add_option("--images", visualize.images, "PPM/PGM images")->take_all();
  vis_cmd->add_option("--manifest", visualize.manifest, "Manifest listing the images");
  vis_cmd->add_option("--out", visualize.out, "Output directory");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  add_common(grad_cmd, common);
  grad_cmd->add_option("--tolerance", gradcheck.tolerance, "Maximum accepted relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const RunConfig cfg = resolve(common);
    if (*gen_cmd) return cmd_generate_data(cfg, generate);
    if (*train_cmd) return cmd_train(cfg, train);
    if (*eval_cmd) return cmd_evaluate(cfg, evaluate);
    if (*vis_cmd) return cmd_visualize_attention(cfg, visualize);
    if (*grad_cmd) return cmd_gradcheck(cfg, gradcheck);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
