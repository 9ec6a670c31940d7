// Command-line driver: synth, train, eval, inspect-weights, gradcheck.
//
// Exit codes: 0 success, 1 usage error, 2 data or contract error,
// 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "biaten/biaten.hpp"

namespace fs = std::filesystem;
using namespace biaten;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

const char* kCsvSchemas = R"(CSV outputs (header row, fixed column order, reals with 17 significant digits):
  metrics.csv               epoch,iter,alpha_mode,lr,l_total,l_inter,l_intra,l_ce,l_ent,l_div,
                            pseudo_label_agreement,accuracy,beta_mean_<domain>...
  epochs.csv                epoch,alpha_mode,pseudo_label_agreement,pseudo_label_accuracy,accuracy,
                            beta_mean_<domain>...
  beta.csv                  sample,label,pred,beta_<domain>...   (label -1 when unknown)
  alpha.csv                 sample,feature_domain,alpha_<domain>...
  beta_domain_mean.csv      domain,mean_beta
  beta_class_deviation.csv  class,count,<domain>...   (class mean beta minus domain mean beta)
  alpha_domain_mean.csv     feature_domain,<domain>...
  pretrain.csv              domain,train_accuracy,target_accuracy)";

struct SynthArgs {
  SynthConfig synth;
  std::size_t d_k = kDefaultBottleneckWidth;
  std::size_t pretrain_epochs = 30;
  fs::path out_dir = "synth_out";
};

struct TrainArgs {
  fs::path bank;
  fs::path heads;
  std::string mode = "bi-aten";
  TrainConfig config;
  std::size_t heads_count = kDefaultHeads;
  std::size_t d_emb = 0;
  fs::path out_dir = "train_out";
};

struct EvalArgs {
  fs::path bank;
  fs::path heads;
  fs::path params;
  fs::path out_dir;
};

int run_synth(const SynthArgs& a) {
  fs::create_directories(a.out_dir);
  const SynthData data = synth_generate(a.synth);
  std::vector<SourceHead> heads;
  std::string table = "domain,train_accuracy,target_accuracy\n";
  for (std::size_t i = 0; i < data.sources.size(); ++i) {
    const std::string name = data.sources[i].domains.front().name;
    write_bank(a.out_dir / ("source_" + name + ".fbnk"), data.sources[i]);
    PretrainConfig pc;
    pc.d_k = a.d_k;
    pc.epochs = a.pretrain_epochs;
    pc.seed = a.synth.seed * 1000 + i + 1;
    PretrainResult r = pretrain_source_head(data.sources[i], name, pc);
    heads.push_back(std::move(r.head));
    table += name + "," + format_real(r.train_accuracy) + ",";
    table += "\n";
  }
  write_heads(a.out_dir / "heads.shed", heads);
  write_bank(a.out_dir / "target.fbnk", data.target);

  // Re-read so the reported numbers match what later commands will see.
  const auto stored_heads = read_heads(a.out_dir / "heads.shed");
  const auto stored_bank = read_bank(a.out_dir / "target.fbnk");
  const auto single = single_source_accuracies(stored_bank, stored_heads);
  std::string final_table = "domain,train_accuracy,target_accuracy\n";
  {
    std::istringstream in(table);
    std::string line;
    std::getline(in, line);
    for (std::size_t i = 0; std::getline(in, line); ++i) final_table += line + format_real(single[i]) + "\n";
  }
  write_text(a.out_dir / "pretrain.csv", final_table);
  std::printf("wrote %zu source banks, heads.shed and target.fbnk to %s\n", data.sources.size(),
              a.out_dir.string().c_str());
  for (std::size_t i = 0; i < single.size(); ++i)
    std::printf("  %s: source-only target accuracy %.4f\n", stored_heads[i].domain_name.c_str(), single[i]);
  std::printf("  uniform average ensemble accuracy %.4f\n", average_ensemble_accuracy(stored_bank, stored_heads));
  return 0;
}

EnsembleMode parse_mode(const std::string& s) { return s == "aten" ? EnsembleMode::kAten : EnsembleMode::kBiAten; }

void print_eval(const EvalReport& r, const std::vector<std::string>& names) {
  if (r.accuracy) std::printf("accuracy %.6f\n", *r.accuracy);
  for (std::size_t i = 0; i < names.size(); ++i)
    std::printf("  mean beta %-12s %.6f\n", names[i].c_str(), r.mean_beta[i]);
}

int run_train(TrainArgs a) {
  const FeatureBank bank = read_bank(a.bank);
  const std::vector<SourceHead> heads = read_heads(a.heads);
  check_bank_heads(bank, heads);
  a.config.mode = parse_mode(a.mode);
  const std::size_t d_emb = a.d_emb ? a.d_emb : default_embed_dim(a.config.mode);
  const EnsembleDims dims{heads.size(), heads.front().d_k(), bank.num_classes, d_emb, a.heads_count};
  BiAtenParams params = init_params(dims, a.config.mode, a.config.seed);

  const TrainResult result = train(bank, heads, params, a.config);
  fs::create_directories(a.out_dir);
  const auto names = domain_names(bank);
  write_params(a.out_dir / "params.batn", result.params, bank.num_classes);
  write_heads(a.out_dir / "adapted_heads.shed", result.heads);
  write_text(a.out_dir / "metrics.csv", metrics_csv(result.metrics, names));
  write_text(a.out_dir / "epochs.csv", epochs_csv(result.epochs, names));
  // report on the stored (f32) model so that `eval` reproduces these tables
  const EvalReport report =
      evaluate(bank, read_heads(a.out_dir / "adapted_heads.shed"), read_params(a.out_dir / "params.batn"));
  write_weight_reports(a.out_dir, report, bank.labels, names);
  std::printf("%s: %zu epochs, %zu iterations, %zu pseudo-label refreshes\n", to_string(a.config.mode),
              result.epochs.size(), result.max_iter, result.refreshes);
  print_eval(report, names);
  return 0;
}

int run_eval(const EvalArgs& a) {
  const FeatureBank bank = read_bank(a.bank);
  const auto heads = read_heads(a.heads);
  const auto params = read_params(a.params);
  const EvalReport report = evaluate(bank, heads, params);
  const auto names = domain_names(bank);
  print_eval(report, names);
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    write_weight_reports(a.out_dir, report, bank.labels, names);
  }
  return 0;
}

int run_inspect(const fs::path& dump_dir, fs::path out_dir) {
  if (out_dir.empty()) out_dir = dump_dir;
  const WeightDump dump = read_weight_dump(dump_dir);
  fs::create_directories(out_dir);
  write_text(out_dir / "beta_domain_mean.csv", beta_domain_mean_csv(dump.report, dump.domains));
  write_text(out_dir / "beta_class_deviation.csv", beta_class_deviation_csv(dump.report, dump.domains));
  write_text(out_dir / "alpha_domain_mean.csv", alpha_domain_mean_csv(dump.report, dump.domains));
  for (std::size_t i = 0; i < dump.domains.size(); ++i)
    std::printf("mean beta %-12s %.6f\n", dump.domains[i].c_str(), dump.report.mean_beta[i]);
  return 0;
}

int run_gradcheck_cmd(std::uint64_t seed, double step, double tolerance) {
  bool ok = true;
  for (const auto& run : run_gradcheck(seed, step)) {
    std::printf("[%s]\n", run.label.c_str());
    for (const auto& t : run.tensors) {
      const bool pass = t.max_rel_error < tolerance;
      ok = ok && pass;
      std::printf("  %-26s %4zu entries  max rel err %.3e  %s\n", t.name.c_str(), t.entries, t.max_rel_error,
                  pass ? "ok" : "FAIL");
    }
  }
  std::printf("%s\n", ok ? "gradcheck passed" : "gradcheck FAILED");
  return ok ? 0 : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bi-level attention ensemble for multi-source-free domain adaptation"};
  app.footer(kCsvSchemas);
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic multi-source benchmark and pretrain heads");
  synth_cmd->add_option("--seed", synth.synth.seed, "random seed")->capture_default_str();
  synth_cmd->add_option("--domains", synth.synth.domains, "number of source domains")->capture_default_str();
  synth_cmd->add_option("--classes", synth.synth.classes, "number of classes")->capture_default_str();
  synth_cmd->add_option("--per-class", synth.synth.per_class, "source samples per class")->capture_default_str();
  synth_cmd->add_option("--target-per-class", synth.synth.target_per_class, "target samples per class")
      ->capture_default_str();
  synth_cmd->add_option("--dlatent", synth.synth.d_latent, "latent dimension")->capture_default_str();
  synth_cmd->add_option("--dbackbone", synth.synth.d_backbone, "backbone feature dimension")->capture_default_str();
  synth_cmd->add_option("--shift", synth.synth.shift, "domain shift strength")->capture_default_str();
  synth_cmd->add_option("--separation", synth.synth.class_separation, "class mean radius")->capture_default_str();
  synth_cmd->add_option("--shuffle-labels", synth.synth.shuffled_label_domains,
                        "source domains trained on shuffled labels");
  synth_cmd->add_option("--dk", synth.d_k, "bottleneck width")->capture_default_str();
  synth_cmd->add_option("--pretrain-epochs", synth.pretrain_epochs, "source pretraining epochs")
      ->capture_default_str();
  synth_cmd->add_option("--out-dir", synth.out_dir, "output directory")->capture_default_str();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "adapt on a target bank");
  train_cmd->add_option("--bank", train_args.bank, "target FBNK file")->required();
  train_cmd->add_option("--heads", train_args.heads, "source SHED file")->required();
  train_cmd->add_option("--mode", train_args.mode, "bi-aten or aten")
      ->check(CLI::IsMember({"bi-aten", "aten"}))
      ->capture_default_str();
  train_cmd->add_option("--lambda", train_args.config.lambda, "intra-loss weight")->capture_default_str();
  train_cmd->add_option("--gamma", train_args.config.gamma, "pseudo-label CE weight")->capture_default_str();
  train_cmd->add_option("--lr", train_args.config.lr0, "initial learning rate")->capture_default_str();
  train_cmd->add_option("--epochs", train_args.config.epochs, "epochs")->capture_default_str();
  train_cmd->add_option("--batch", train_args.config.batch_size, "batch size")->capture_default_str();
  train_cmd->add_option("--d-alter", train_args.config.d_alter, "alternate interval")->capture_default_str();
  train_cmd->add_option("--heads-count", train_args.heads_count, "attention heads")->capture_default_str();
  train_cmd->add_option("--d-emb", train_args.d_emb, "embedding width (default 512 bi-aten, 2048 aten)");
  train_cmd->add_option("--smoothing", train_args.config.smoothing, "label smoothing")->capture_default_str();
  train_cmd->add_option("--momentum", train_args.config.momentum, "SGD momentum")->capture_default_str();
  train_cmd->add_option("--eval-every", train_args.config.eval_every, "evaluate every k epochs")
      ->capture_default_str();
  train_cmd->add_option("--seed", train_args.config.seed, "random seed")->capture_default_str();
  train_cmd->add_option("--out-dir", train_args.out_dir, "output directory")->capture_default_str();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate trained parameters and write weight tables");
  eval_cmd->add_option("--bank", eval_args.bank, "target FBNK file")->required();
  eval_cmd->add_option("--heads", eval_args.heads, "adapted SHED file")->required();
  eval_cmd->add_option("--params", eval_args.params, "BATN parameter file")->required();
  eval_cmd->add_option("--out-dir", eval_args.out_dir, "directory for CSV tables");

  fs::path dump_dir, inspect_out;
  auto* inspect_cmd = app.add_subcommand("inspect-weights", "rebuild weight tables from beta.csv/alpha.csv");
  inspect_cmd->add_option("--dump-dir", dump_dir, "directory holding beta.csv and alpha.csv")->required();
  inspect_cmd->add_option("--out-dir", inspect_out, "output directory (default: dump dir)");

  std::uint64_t gc_seed = 7;
  double gc_step = kGradcheckStep;
  double gc_tol = kGradcheckTolerance;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of the analytic gradients");
  gc_cmd->add_option("--seed", gc_seed, "seed of the tiny problem")->capture_default_str();
  gc_cmd->add_option("--step", gc_step, "central difference step")->capture_default_str();
  gc_cmd->add_option("--tolerance", gc_tol, "maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) return run_train(train_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*inspect_cmd) return run_inspect(dump_dir, inspect_out);
    if (*gc_cmd) return run_gradcheck_cmd(gc_seed, gc_step, gc_tol);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
