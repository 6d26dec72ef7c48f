#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "otpr/config.hpp"
#include "otpr/error.hpp"
#include "otpr/harness.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transport-guided fine-tuning of diffusion policies"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool quiet = false;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "Config file (key = value lines)");
  app.add_option("--seed", seed, "Overrides the config seed");
  app.add_option("--out", out_dir, "Overrides the output directory");
  app.add_flag("--quiet", quiet, "Suppress progress messages");
  app.add_option("--set", overrides, "Extra key=value assignments applied after the config file");

  auto* pretrain = app.add_subcommand("pretrain", "Train the score model on demonstrations");
  auto* finetune = app.add_subcommand("finetune", "Online fine-tuning with transport guidance");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (or the scripted expert)");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate");
  auto* ablate = app.add_subcommand("ablate", "Guidance or mask ablation over several seeds");
  auto* ot_debug = app.add_subcommand("ot-debug", "Dump a small discrete transport instance");
  for (auto* sub : {pretrain, finetune, eval, ablate, ot_debug}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    otpr::config::RunConfig cfg;
    if (!config_path.empty()) cfg = otpr::config::load_config(config_path);
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw otpr::ConfigError("--set expects key=value, got '" + kv + "'");
      otpr::config::apply_assignment(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
    const otpr::harness::Logger log(quiet);

    if (pretrain->parsed()) {
      otpr::harness::cmd_pretrain(cfg, log);
    } else if (finetune->parsed()) {
      const auto s = otpr::harness::cmd_finetune(cfg, log);
      if (!quiet) std::cout << "final success rate " << s.final_success() << "\n";
    } else if (eval->parsed()) {
      std::optional<std::filesystem::path> ck;
      if (!checkpoint.empty()) ck = checkpoint;
      const auto s = otpr::harness::cmd_eval(cfg, ck, log);
      std::cout << "episodes " << s.episodes << "\nmean_return " << s.mean_return << " ["
                << s.return_ci_low << ", " << s.return_ci_high << "]\nsuccess_rate "
                << s.success_rate << " [" << s.success_ci_low << ", " << s.success_ci_high << "]\n";
    } else if (ablate->parsed()) {
      otpr::harness::cmd_ablate(cfg, log);
    } else if (ot_debug->parsed()) {
      otpr::harness::cmd_ot_debug(cfg, log);
    }
  } catch (const otpr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const otpr::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const otpr::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const otpr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return 0;
}
