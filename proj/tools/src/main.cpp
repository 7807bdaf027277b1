#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cbnn/errors.hpp"
#include "cbnn_cli/commands.hpp"

using namespace cbnn;
using namespace cbnn::cli;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  long long seed = -1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment JSON");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--set", c.sets, "dotted.key=value override (repeatable)");
}

ExperimentConfig resolve(const Common& c, data::SimId fallback) {
  json doc = c.config.empty() ? default_document(fallback) : load_json_file(c.config);
  for (const auto& s : c.sets) apply_override(doc, s);
  if (c.seed >= 0) doc["seed"] = c.seed;
  if (!c.out.empty()) doc["output"] = c.out;
  return parse_experiment(doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cbnn: constrained Bayesian neural networks"};
  app.require_subcommand(1);

  Common common;
  auto* simulate = app.add_subcommand("simulate", "write simulated train/test CSVs and constraints");
  auto* trainc = app.add_subcommand("train", "train and write checkpoint.json + history.jsonl");
  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on the test split");
  auto* grad = app.add_subcommand("gradcheck", "compare tape gradients with finite differences");
  auto* reproc = app.add_subcommand("repro", "run a full comparison table");
  for (auto* cmd : {simulate, trainc, evaluate, grad, reproc}) add_common(cmd, common);

  std::string checkpoint;
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint path (default OUT/checkpoint.json)");
  bool corrupt = false;
  grad->add_flag("--corrupt-gradient", corrupt, "perturb the analytic gradient (negative control)");
  std::string table;
  reproc->add_option("table", table, "sim1 or sim2")->required()->check(CLI::IsMember({"sim1", "sim2"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*simulate) return cmd_simulate(resolve(common, data::SimId::sim2), std::cout);
    if (*trainc) return cmd_train(resolve(common, data::SimId::sim2), std::cout);
    if (*evaluate) return cmd_evaluate(resolve(common, data::SimId::sim2), checkpoint, std::cout);
    if (*grad) return cmd_gradcheck(resolve(common, data::SimId::sim2), corrupt, std::cout);
    if (*reproc) {
      const auto id = data::parse_sim_id(table);
      return cmd_repro(id, resolve(common, id), std::cout);
    }
  } catch (const NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kNumericalAbort;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ContractError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfigError;
  } catch (const DimensionError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfigError;
  } catch (const DomainError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfigError;
  }
  return kOk;
}
