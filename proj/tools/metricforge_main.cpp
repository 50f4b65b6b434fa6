// Command-line front end: dataset generation, training, evaluation,
// gradient checking, loss/feature ablations, and offline re-ranking.
//
// Exit codes: 0 success, 1 failed check (gradcheck above tolerance),
// 2 configuration or input errors.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "metricforge/metricforge.hpp"

namespace mf = metricforge;
using nlohmann::json;

namespace {

struct GenArgs {
  mf::SynthSpec spec;
  std::string out;
  std::string pair_out;
  std::vector<double> shift_offset;
  std::uint64_t rotation_seed = 1;
  bool rotation_seed_set = false;
};

struct TrainArgs {
  mf::TrainConfig cfg;
  std::string data;
  std::string checkpoint_out;
  std::string log_out;
};

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  int queries_per_class = 5;
  std::uint64_t split_seed = 1234;
  bool rerank = false;
  mf::RerankConfig rerank_cfg;
  std::string dump_dist;
  std::string dump_joint;
  std::string json_out;
};

struct GradcheckArgs {
  mf::GradCheckOptions opts;
  bool skip_model_surface = false;
  std::string json_out;
};

struct AblateArgs {
  mf::TrainConfig cfg;
  std::string data;
  int queries_per_class = 5;
  std::uint64_t split_seed = 1234;
  std::string json_out;
};

struct RerankArgs {
  std::string dist;
  std::size_t n_query = 0;
  mf::RerankConfig cfg;
  std::string out;
  std::string json_out;
};

void write_json_lines(const std::string& path, const std::vector<json>& lines) {
  if (path.empty()) return;
  std::ofstream file(path, std::ios::binary);
  if (!file) throw mf::Error("cannot open for writing: " + path);
  for (const json& j : lines) file << j.dump() << "\n";
  if (!file) throw mf::Error("failed writing: " + path);
}

mf::Matrix embed(const mf::ModelParams& params, const mf::Matrix& features) {
  return mf::forward(params, features, mf::RunMode::infer).post_bn_normalized;
}

double rank_at(const std::vector<double>& cmc, std::size_t k) {
  if (cmc.empty()) return 0.0;
  return cmc[std::min(k, cmc.size()) - 1];
}

int run_gen(const GenArgs& args) {
  mf::SynthSpec spec = args.spec;
  if (!args.pair_out.empty() &&
      (!args.shift_offset.empty() || args.rotation_seed_set)) {
    mf::DomainShift shift;
    shift.rotation_seed = args.rotation_seed;
    if (args.shift_offset.size() == 1) {
      shift.offset.assign(static_cast<std::size_t>(spec.dim),
                          args.shift_offset[0]);
    } else {
      shift.offset = args.shift_offset;
    }
    spec.domain_shift = shift;
  }
  if (args.pair_out.empty()) {
    const mf::SyntheticDataset ds = mf::generate(spec);
    mf::save_dataset(ds, args.out);
    std::printf("wrote %zu rows (%d classes, dim %d) to %s\n", ds.rows.size(),
                ds.n_classes, ds.dim, args.out.c_str());
  } else {
    const auto [domain_a, domain_b] = mf::generate_domain_pair(spec);
    mf::save_dataset(domain_a, args.out);
    mf::save_dataset(domain_b, args.pair_out);
    std::printf("wrote %zu rows to %s and a shifted twin to %s\n",
                domain_a.rows.size(), args.out.c_str(), args.pair_out.c_str());
  }
  return 0;
}

int run_train(const TrainArgs& args) {
  const mf::SyntheticDataset ds = mf::load_dataset(args.data);
  const mf::FitResult result = mf::fit(ds, args.cfg);
  if (!args.checkpoint_out.empty()) {
    mf::save_checkpoint(result.params, args.checkpoint_out);
  }
  if (!args.log_out.empty()) {
    result.log.write_jsonl(args.log_out);
  }
  if (result.log.records.empty()) {
    std::printf("trained 0 epochs\n");
  } else {
    const mf::EpochRecord& last = result.log.records.back();
    std::printf("trained %zu epochs  m_loss %.6f -> %.6f\n",
                result.log.records.size(), result.log.records.front().m_loss,
                last.m_loss);
  }
  if (!args.checkpoint_out.empty()) {
    std::printf("checkpoint: %s\n", args.checkpoint_out.c_str());
  }
  if (!args.log_out.empty()) {
    std::printf("log: %s\n", args.log_out.c_str());
  }
  return 0;
}

int run_eval(const EvalArgs& args) {
  const mf::SyntheticDataset ds = mf::load_dataset(args.data);
  const mf::ModelParams params = mf::load_checkpoint(args.checkpoint);
  const mf::EvalSplit split =
      mf::make_eval_split(ds, args.queries_per_class, args.split_seed);

  std::optional<mf::RerankConfig> rerank;
  if (args.rerank) rerank = args.rerank_cfg;
  const mf::EvalReport report = mf::evaluate(split, params, rerank);

  std::printf("queries used: %d\n", report.n_queries_used);
  std::printf("%-12s %8s %8s %8s %8s\n", "metrics", "rank-1", "rank-5",
              "rank-10", "mAP");
  std::printf("%-12s %8.4f %8.4f %8.4f %8.4f\n", "baseline",
              rank_at(report.cmc, 1), rank_at(report.cmc, 5),
              rank_at(report.cmc, 10), report.map);
  std::vector<json> lines;
  lines.push_back(json{{"kind", "eval"},
                       {"variant", "baseline"},
                       {"n_queries", report.n_queries_used},
                       {"rank1", rank_at(report.cmc, 1)},
                       {"rank5", rank_at(report.cmc, 5)},
                       {"rank10", rank_at(report.cmc, 10)},
                       {"map", report.map}});
  if (report.reranked) {
    std::printf("%-12s %8.4f %8.4f %8.4f %8.4f\n", "reranked",
                rank_at(report.reranked->cmc, 1),
                rank_at(report.reranked->cmc, 5),
                rank_at(report.reranked->cmc, 10), report.reranked->map);
    lines.push_back(json{{"kind", "eval"},
                         {"variant", "reranked"},
                         {"n_queries", report.reranked->n_queries_used},
                         {"rank1", rank_at(report.reranked->cmc, 1)},
                         {"rank5", rank_at(report.reranked->cmc, 5)},
                         {"rank10", rank_at(report.reranked->cmc, 10)},
                         {"map", report.reranked->map}});
  }
  write_json_lines(args.json_out, lines);

  if (!args.dump_dist.empty() || !args.dump_joint.empty()) {
    const mf::Matrix q = embed(params, split.query.features);
    const mf::Matrix g = embed(params, split.gallery.features);
    if (!args.dump_dist.empty()) {
      mf::save_dist_matrix(args.dump_dist, mf::cross_distances(q, g));
      std::printf("distance dump: %s\n", args.dump_dist.c_str());
    }
    if (!args.dump_joint.empty()) {
      mf::Matrix stacked(q.rows + g.rows, q.cols);
      std::copy(q.data.begin(), q.data.end(), stacked.data.begin());
      std::copy(g.data.begin(), g.data.end(),
                stacked.data.begin() + static_cast<std::ptrdiff_t>(q.data.size()));
      mf::EmbeddingBatch joint_batch;
      joint_batch.features = std::move(stacked);
      joint_batch.class_ids.assign(q.rows + g.rows, 0);
      mf::save_dist_matrix(args.dump_joint,
                           mf::pairwise_distances(joint_batch).values);
      std::printf("joint distance dump: %s (first %zu rows are queries)\n",
                  args.dump_joint.c_str(), q.rows);
    }
  }
  return 0;
}

int run_gradcheck(const GradcheckArgs& args) {
  mf::GradCheckOptions opts = args.opts;
  opts.check_model_surface = !args.skip_model_surface;
  const mf::GradCheckReport report = mf::run_gradient_checks(opts);
  std::printf("trials: %zu  coordinates: %zu checked, %zu skipped\n",
              report.trials_run, report.coords_checked, report.coords_skipped);
  std::printf("max relative error: %.3e (tolerance %.1e)\n",
              report.max_rel_err, opts.tolerance);
  if (!report.worst_coordinate.empty()) {
    std::printf("worst coordinate: %s\n", report.worst_coordinate.c_str());
  }
  const bool ok = report.passed(opts.tolerance);
  write_json_lines(args.json_out,
                   {json{{"kind", "gradcheck"},
                         {"trials", report.trials_run},
                         {"coords_checked", report.coords_checked},
                         {"coords_skipped", report.coords_skipped},
                         {"max_rel_err", report.max_rel_err},
                         {"tolerance", opts.tolerance},
                         {"passed", ok}}});
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

const char* mode_name(mf::TrainMode mode) {
  switch (mode) {
    case mf::TrainMode::combined: return "combined";
    case mf::TrainMode::lin_only: return "lin_only";
    case mf::TrainMode::softmax_only: return "softmax_only";
  }
  return "?";
}

const char* tap_name(mf::FeatureTap tap) {
  return tap == mf::FeatureTap::post_bn ? "post_bn" : "pre_bn";
}

int run_ablate(const AblateArgs& args) {
  const mf::SyntheticDataset ds = mf::load_dataset(args.data);
  const mf::EvalSplit split =
      mf::make_eval_split(ds, args.queries_per_class, args.split_seed);
  static constexpr mf::TrainMode kModes[] = {mf::TrainMode::combined,
                                             mf::TrainMode::lin_only,
                                             mf::TrainMode::softmax_only};
  static constexpr mf::FeatureTap kTaps[] = {mf::FeatureTap::post_bn,
                                             mf::FeatureTap::pre_bn};
  std::printf("%-12s  %-8s  %8s  %8s\n", "mode", "features", "rank-1", "mAP");
  std::vector<json> lines;
  for (const mf::TrainMode mode : kModes) {
    for (const mf::FeatureTap tap : kTaps) {
      mf::TrainConfig cfg = args.cfg;
      cfg.mode = mode;
      cfg.feature_tap = tap;
      const mf::FitResult result = mf::fit(ds, cfg);
      const mf::EvalReport report = mf::evaluate(split, result.params);
      std::printf("%-12s  %-8s  %8.4f  %8.4f\n", mode_name(mode),
                  tap_name(tap), rank_at(report.cmc, 1), report.map);
      lines.push_back(json{{"kind", "ablation"},
                           {"mode", mode_name(mode)},
                           {"features", tap_name(tap)},
                           {"rank1", rank_at(report.cmc, 1)},
                           {"map", report.map}});
    }
  }
  write_json_lines(args.json_out, lines);
  return 0;
}

int run_rerank(const RerankArgs& args) {
  const mf::Matrix joint = mf::load_dist_matrix(args.dist);
  const mf::Matrix rescored =
      mf::k_reciprocal_rerank_joint(joint, args.n_query, args.cfg);
  mf::save_dist_matrix(args.out, rescored);
  double mean = 0.0;
  for (double v : rescored.data) mean += v;
  if (!rescored.data.empty()) mean /= static_cast<double>(rescored.data.size());
  std::printf("rescored %zu x %zu distances -> %s (mean %.6f)\n", rescored.rows,
              rescored.cols, args.out.c_str(), mean);
  write_json_lines(args.json_out, {json{{"kind", "rerank"},
                                        {"rows", rescored.rows},
                                        {"cols", rescored.cols},
                                        {"k1", args.cfg.k1},
                                        {"k2", args.cfg.k2},
                                        {"lambda", args.cfg.lambda},
                                        {"mean_distance", mean}}});
  return 0;
}

void add_loss_options(CLI::App* sub, mf::LossConfig& loss) {
  sub->add_option("--radius", loss.radius,
                  "target radius for same-class pairs")
      ->capture_default_str();
  sub->add_option("--temperature", loss.temperature,
                  "negative-pair weighting temperature")
      ->capture_default_str();
  sub->add_option("--lin-weight", loss.lin_weight,
                  "weight of the ranking term in the combined loss")
      ->capture_default_str();
  sub->add_option("--epsilon-ls", loss.epsilon_ls,
                  "label smoothing coefficient")
      ->capture_default_str();
  sub->add_flag("!--no-detach-weights", loss.detach_weights,
                "backpropagate through the negative-pair weights");
}

void add_train_options(CLI::App* sub, mf::TrainConfig& cfg) {
  sub->add_option("--lr", cfg.base_lr, "base learning rate")
      ->capture_default_str();
  sub->add_option("--warmup", cfg.warmup_epochs, "warmup epochs")
      ->capture_default_str();
  sub->add_option("--epochs", cfg.total_epochs, "total epochs")
      ->capture_default_str();
  sub->add_option("--momentum", cfg.momentum, "SGD momentum")
      ->capture_default_str();
  sub->add_option("--weight-decay", cfg.weight_decay, "L2 weight decay")
      ->capture_default_str();
  sub->add_option("--batch-p", cfg.batch_p, "identities per batch")
      ->capture_default_str();
  sub->add_option("--batch-k", cfg.batch_k, "samples per identity")
      ->capture_default_str();
  sub->add_option("--hidden", cfg.hidden_sizes,
                  "encoder hidden layer sizes, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  sub->add_option("--embed-dim", cfg.embed_dim, "embedding dimension")
      ->capture_default_str();
  add_loss_options(sub, cfg.loss);
}

void add_mode_options(CLI::App* sub, mf::TrainConfig& cfg) {
  static const std::map<std::string, mf::TrainMode> kModeMap{
      {"combined", mf::TrainMode::combined},
      {"lin_only", mf::TrainMode::lin_only},
      {"softmax_only", mf::TrainMode::softmax_only}};
  static const std::map<std::string, mf::FeatureTap> kTapMap{
      {"post_bn", mf::FeatureTap::post_bn},
      {"pre_bn", mf::FeatureTap::pre_bn}};
  sub->add_option("--mode", cfg.mode,
                  "objective: combined | lin_only | softmax_only")
      ->transform(CLI::CheckedTransformer(kModeMap, CLI::ignore_case));
  sub->add_option("--tap", cfg.feature_tap,
                  "features fed to the ranking loss: post_bn | pre_bn")
      ->transform(CLI::CheckedTransformer(kTapMap, CLI::ignore_case));
}

void add_rerank_options(CLI::App* sub, mf::RerankConfig& cfg) {
  sub->add_option("--k1", cfg.k1, "reciprocal neighborhood size")
      ->capture_default_str();
  sub->add_option("--k2", cfg.k2, "query expansion neighborhood size")
      ->capture_default_str();
  sub->add_option("--lambda", cfg.lambda,
                  "blend toward the original distance (1 keeps it)")
      ->capture_default_str();
}

void configure(CLI::App* sub) {
  // Parsed by hand in expand_config_args before CLI11 runs; registered here
  // only so it shows up in --help.
  sub->add_option("--config",
                  "flat key=value config file; explicit flags win")
      ->option_text("FILE");
}

std::string trim(const std::string& s) {
  const std::size_t first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const std::size_t last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

struct ConfigEntry {
  std::string key;
  std::string value;
};

std::vector<ConfigEntry> read_config_file(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw mf::ConfigInvalid("cannot open config file: " + path);
  std::vector<ConfigEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(file, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#' || stripped[0] == ';') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw mf::ConfigInvalid("config file " + path + " line " +
                              std::to_string(line_no) +
                              ": expected key=value");
    }
    ConfigEntry entry{trim(stripped.substr(0, eq)),
                      trim(stripped.substr(eq + 1))};
    if (entry.key.empty()) {
      throw mf::ConfigInvalid("config file " + path + " line " +
                              std::to_string(line_no) + ": empty key");
    }
    entries.push_back(std::move(entry));
  }
  return entries;
}

bool has_flag(const std::vector<std::string>& args, const std::string& name) {
  for (const std::string& arg : args) {
    if (arg == name || arg.rfind(name + "=", 0) == 0) return true;
  }
  return false;
}

/// Pulls --config FILE out of the raw arguments and splices the file's
/// key=value pairs in as long options, placed so that flags given on the
/// command line take precedence. Unknown keys are rejected by name.
std::vector<std::string> expand_config_args(int argc, char** argv,
                                            const CLI::App& app) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  for (std::size_t i = 0; i < args.size();) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) {
        throw mf::ConfigInvalid("--config needs a file path");
      }
      config_path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                 args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
    } else {
      ++i;
    }
  }
  if (config_path.empty()) return args;

  std::size_t sub_pos = args.size();
  const CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (!args[i].empty() && args[i][0] != '-') {
      sub_pos = i;
      sub = app.get_subcommand_no_throw(args[i]);
      break;
    }
  }
  if (sub == nullptr) {
    throw mf::ConfigInvalid("--config requires a subcommand");
  }

  std::vector<std::string> expanded;
  for (const ConfigEntry& entry : read_config_file(config_path)) {
    const std::string flag = "--" + entry.key;
    if (entry.key == "config" ||
        sub->get_option_no_throw(flag) == nullptr) {
      throw mf::ConfigInvalid("config file " + config_path +
                              ": unknown key '" + entry.key + "'");
    }
    if (has_flag(args, flag)) continue;  // explicit flag wins
    expanded.push_back(flag + "=" + entry.value);
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos) + 1,
              expanded.begin(), expanded.end());
  return args;
}

/// Seed precedence: --seed flag, then METRIC_FORGE_SEED, then config file,
/// then the default. The environment override is applied after parsing so
/// it beats config values but loses to an explicit flag.
std::optional<std::uint64_t> env_seed_override(
    const std::vector<std::string>& raw_args) {
  if (has_flag(raw_args, "--seed")) return std::nullopt;
  const char* env = std::getenv("METRIC_FORGE_SEED");
  if (env == nullptr || *env == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == nullptr || *end != '\0') {
    throw mf::ConfigInvalid(
        "METRIC_FORGE_SEED must be a non-negative integer, got '" +
        std::string(env) + "'");
  }
  return static_cast<std::uint64_t>(v);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "metricforge: combined ranking+classification metric learning at desk "
      "scale"};
  app.require_subcommand(1);

  GenArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  configure(gen);
  gen->add_option("--out", gen_args.out, "output dataset path")->required();
  gen->add_option("--classes", gen_args.spec.n_classes, "number of identities")
      ->capture_default_str();
  gen->add_option("--per-class", gen_args.spec.per_class,
                  "samples per identity")
      ->capture_default_str();
  gen->add_option("--dim", gen_args.spec.dim, "feature dimension")
      ->capture_default_str();
  gen->add_option("--noise", gen_args.spec.noise_sigma,
                  "noise scale around each prototype (expected vector norm)")
      ->capture_default_str();
  gen->add_option("--cameras", gen_args.spec.n_cameras, "number of cameras")
      ->capture_default_str();
  gen->add_option("--seed", gen_args.spec.seed, "generation seed")
      ->capture_default_str();
  gen->add_option("--pair-out", gen_args.pair_out,
                  "also write a domain-shifted twin dataset here");
  gen->add_option("--shift-offset", gen_args.shift_offset,
                  "offset for the twin; one value broadcasts to all dims")
      ->delimiter(',');
  CLI::Option* rotation_seed_opt = gen->add_option(
      "--rotation-seed", gen_args.rotation_seed, "rotation seed for the twin");

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model on a dataset");
  configure(train);
  train->add_option("--data", train_args.data, "input dataset path")
      ->required();
  train->add_option("--checkpoint-out", train_args.checkpoint_out,
                    "write the trained model here");
  train->add_option("--log-out", train_args.log_out,
                    "write per-epoch JSONL records here");
  train->add_option("--seed", train_args.cfg.seed, "training seed")
      ->capture_default_str();
  add_train_options(train, train_args.cfg);
  add_mode_options(train, train_args.cfg);

  EvalArgs eval_args;
  CLI::App* eval =
      app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  configure(eval);
  eval->add_option("--data", eval_args.data, "input dataset path")->required();
  eval->add_option("--checkpoint", eval_args.checkpoint, "model checkpoint")
      ->required();
  eval->add_option("--queries-per-class", eval_args.queries_per_class,
                   "queries drawn per identity")
      ->capture_default_str();
  eval->add_option("--seed", eval_args.split_seed, "query/gallery split seed")
      ->capture_default_str();
  eval->add_flag("--rerank", eval_args.rerank,
                 "also report k-reciprocal re-ranked metrics");
  add_rerank_options(eval, eval_args.rerank_cfg);
  eval->add_option("--dump-dist", eval_args.dump_dist,
                   "write the query x gallery distance matrix here");
  eval->add_option("--dump-joint", eval_args.dump_joint,
                   "write the joint (query+gallery) distance matrix here");
  eval->add_option("--json-out", eval_args.json_out,
                   "write metrics as JSON lines here");

  GradcheckArgs gradcheck_args;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "compare analytic gradients against finite differences");
  configure(gradcheck);
  gradcheck->add_option("--seed", gradcheck_args.opts.seed, "trial seed")
      ->capture_default_str();
  gradcheck->add_option("--trials", gradcheck_args.opts.trials,
                        "number of random configurations")
      ->capture_default_str();
  gradcheck->add_option("--step", gradcheck_args.opts.step,
                        "central-difference half step")
      ->capture_default_str();
  gradcheck->add_option("--tolerance", gradcheck_args.opts.tolerance,
                        "max allowed relative error")
      ->capture_default_str();
  gradcheck->add_flag("--no-model-surface", gradcheck_args.skip_model_surface,
                      "check only the loss surface, not model parameters");
  gradcheck->add_option("--json-out", gradcheck_args.json_out,
                        "write the report as a JSON line here");

  AblateArgs ablate_args;
  ablate_args.cfg.total_epochs = 40;
  ablate_args.cfg.warmup_epochs = 5;
  CLI::App* ablate = app.add_subcommand(
      "ablate", "train and evaluate every objective/feature-tap combination");
  configure(ablate);
  ablate->add_option("--data", ablate_args.data, "input dataset path")
      ->required();
  ablate->add_option("--queries-per-class", ablate_args.queries_per_class,
                     "queries drawn per identity")
      ->capture_default_str();
  ablate->add_option("--split-seed", ablate_args.split_seed,
                     "query/gallery split seed")
      ->capture_default_str();
  ablate->add_option("--seed", ablate_args.cfg.seed, "training seed")
      ->capture_default_str();
  ablate->add_option("--json-out", ablate_args.json_out,
                     "write one JSON line per ablation row here");
  add_train_options(ablate, ablate_args.cfg);

  RerankArgs rerank_args;
  CLI::App* rerank = app.add_subcommand(
      "rerank", "re-score a dumped joint distance matrix");
  configure(rerank);
  rerank->add_option("--dist", rerank_args.dist,
                     "joint distance matrix dump (queries first)")
      ->required();
  rerank->add_option("--n-query", rerank_args.n_query,
                     "number of leading rows that are queries")
      ->required();
  rerank->add_option("--out", rerank_args.out,
                     "write the re-scored query x gallery matrix here")
      ->required();
  add_rerank_options(rerank, rerank_args.cfg);
  rerank->add_option("--json-out", rerank_args.json_out,
                     "write a JSON summary line here");

  const std::vector<std::string> raw_args(argv + 1, argv + argc);
  try {
    std::vector<std::string> args = expand_config_args(argc, argv, app);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  gen_args.rotation_seed_set = rotation_seed_opt->count() > 0;

  try {
    if (const auto seed = env_seed_override(raw_args)) {
      gen_args.spec.seed = *seed;
      train_args.cfg.seed = *seed;
      eval_args.split_seed = *seed;
      gradcheck_args.opts.seed = *seed;
      ablate_args.cfg.seed = *seed;
    }
    if (gen->parsed()) return run_gen(gen_args);
    if (train->parsed()) return run_train(train_args);
    if (eval->parsed()) return run_eval(eval_args);
    if (gradcheck->parsed()) return run_gradcheck(gradcheck_args);
    if (ablate->parsed()) return run_ablate(ablate_args);
    if (rerank->parsed()) return run_rerank(rerank_args);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
