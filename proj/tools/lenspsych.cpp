// lenspsych: layer-wise surprisal and reading-cost regression from the command line.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "lenspsych/errors.hpp"
#include "lenspsych/pipeline.hpp"
#include "lenspsych/run_config.hpp"

namespace fs = std::filesystem;
using namespace lenspsych;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitData = 1;
constexpr int kExitConfig = 2;

struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> workers;
  std::optional<std::string> lens;
  std::optional<std::string> clause_final;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("-c,--config", f.config, "run configuration (JSON)")->required();
  cmd->add_option("--seed", f.seed, "random seed (overrides config)");
  cmd->add_option("--out-dir", f.out_dir, "output directory (overrides config)");
  cmd->add_option("--workers", f.workers, "worker threads (overrides " + std::string(kWorkersEnv) + " and config)");
  cmd->add_option("--lens", f.lens, "logit | tuned | both");
  cmd->add_option("--clause-final", f.clause_final, "off | column | punct");
}

RunConfig resolve(const RunFlags& f) {
  auto config = load_run_config(f.config);
  if (f.seed) config.seed = *f.seed;
  if (f.out_dir) config.out_dir = fs::absolute(*f.out_dir);
  if (f.lens) config.lens = parse_lens_selection(*f.lens);
  if (f.clause_final) config.clause_final = parse_clause_final_mode(*f.clause_final);
  config.workers = resolve_workers(f.workers, config.workers);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise LM surprisal as a predictor of human reading costs"};
  app.require_subcommand(1);

  RunFlags run;
  auto* surprisal = app.add_subcommand("surprisal", "per-layer word surprisal for every model, dataset and lens");
  auto* fit_lens = app.add_subcommand("fit-lens", "train tuned-lens translators and write KL curves");
  auto* evaluate = app.add_subcommand("evaluate", "delta log-likelihood per dataset, model, lens and layer");
  auto* report = app.add_subcommand("report", "tables, scaling, interaction and error analyses");
  auto* correlate = app.add_subcommand("correlate", "layer surprisal vs bigram and reference-model surprisal");
  for (auto* cmd : {surprisal, fit_lens, evaluate, report, correlate}) add_run_flags(cmd, run);

  std::string ngram_corpus, ngram_out = "ngram";
  std::string smoothing = "kneser_ney";
  double k = 1.0, discount = 0.75;
  bool no_normalize = false;
  std::optional<int> ngram_workers;
  auto* ngram = app.add_subcommand("ngram-train", "count and save a smoothed word bigram model");
  ngram->add_option("--corpus", ngram_corpus, "one sentence per line")->required();
  ngram->add_option("--out-dir", ngram_out, "output directory");
  ngram->add_option("--smoothing", smoothing, "add_k | kneser_ney");
  ngram->add_option("--k", k, "add-k pseudo-count");
  ngram->add_option("--discount", discount, "Kneser-Ney discount");
  ngram->add_flag("--no-normalize", no_normalize, "count words verbatim");
  ngram->add_option("--workers", ngram_workers, "counting threads");

  ToyOptions toy;
  std::string toy_out = "toy";
  auto* make_toy = app.add_subcommand("make-toy", "write a deterministic toy bundle (or a full fixture)");
  make_toy->add_option("--out-dir", toy_out, "output directory");
  make_toy->add_option("--seed", toy.seed, "weight seed");
  make_toy->add_option("--layers", toy.config.n_layers);
  make_toy->add_option("--d-model", toy.config.d_model);
  make_toy->add_option("--heads", toy.config.n_heads);
  make_toy->add_option("--positions", toy.config.max_positions);
  make_toy->add_flag("--fixture", toy.fixture, "also write models, corpora, reading data and config.json");

  std::string bundle_dir;
  auto* validate = app.add_subcommand("validate-bundle", "check a model bundle and its tokenizer files");
  validate->add_option("dir", bundle_dir, "bundle directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (surprisal->parsed()) cmd_surprisal(resolve(run), std::cerr);
    if (fit_lens->parsed()) cmd_fit_lens(resolve(run), std::cerr);
    if (evaluate->parsed()) cmd_evaluate(resolve(run), std::cerr);
    if (report->parsed()) cmd_report(resolve(run), std::cerr);
    if (correlate->parsed()) cmd_correlate(resolve(run), std::cerr);
    if (ngram->parsed()) {
      SmoothingConfig s{parse_smoothing(smoothing), k, discount, !no_normalize};
      cmd_ngram_train(ngram_corpus, ngram_out, s, resolve_workers(ngram_workers, 1), std::cerr);
    }
    if (make_toy->parsed()) cmd_make_toy(toy_out, toy, std::cerr);
    if (validate->parsed()) std::cout << cmd_validate_bundle(bundle_dir) << '\n';
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}
