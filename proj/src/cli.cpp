#include "nt/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "nt/checkpoint.hpp"
#include "nt/experiments.hpp"
#include "nt/pruning.hpp"
#include "nt/report.hpp"

namespace nt {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kSynopsis =
    "usage: ntfuse <command> [options]\n"
    "  train      --spec FILE --out CKPT [--seed N] [--member M]\n"
    "  fuse       --method {nt,nt-iter,nt-rec,avg,align} --in CKPT CKPT... [--sparsity S] --out CKPT\n"
    "  prune      --in CKPT (--keep-counts LIST | --sparsity S) --out CKPT\n"
    "  eval       --in CKPT --data DESC\n"
    "  distill    --student CKPT --teachers CKPT... --data DESC [--temperature T] [--soft-weight W]\n"
    "             [--epochs N] [--out CKPT]\n"
    "  experiment --spec JSON --out DIR\n"
    "  report     --in DIR --format {csv,json,svg} [--out FILE]\n";

[[noreturn]] void usage(const std::string& what) { throw Error(ErrorKind::Usage, what); }

json read_json_arg(const std::string& arg) {
  try {
    if (fs::exists(arg)) return json::parse(read_text(arg));
    return json::parse(arg);
  } catch (const json::exception& e) {
    usage("cannot parse JSON from '" + arg + "': " + e.what());
  }
}

// A dataset descriptor, or an experiment spec carrying one under "dataset".
DatasetDescriptor descriptor_arg(const std::string& arg) {
  const json j = read_json_arg(arg);
  return DatasetDescriptor::from_json(j.contains("dataset") ? j.at("dataset") : j);
}

std::vector<Network> load_all(const std::vector<std::string>& paths) {
  std::vector<Network> nets;
  nets.reserve(paths.size());
  for (const auto& p : paths) nets.push_back(load_checkpoint(p));
  return nets;
}

void print_eval(std::ostream& out, const Evaluation& e) {
  out << json{{"accuracy", canonical(e.accuracy)}, {"loss", canonical(e.mean_loss)}}.dump() << "\n";
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Neuron transplantation ensemble fusion", "ntfuse"};
  app.require_subcommand(1);
  app.set_help_flag("-h,--help");

  std::string spec_path, out_path, method = "nt", data, student, format = "csv", in_dir;
  std::vector<std::string> inputs, teachers;
  std::optional<double> sparsity;
  std::vector<std::size_t> keep_counts;
  std::uint64_t seed = 0;
  std::size_t member = 0, epochs = 30;
  float temperature = 2.0f, soft_weight = 1.0f;

  auto* train_cmd = app.add_subcommand("train", "train one ensemble member from an experiment spec");
  train_cmd->add_option("--spec", spec_path)->required();
  train_cmd->add_option("--out", out_path)->required();
  train_cmd->add_option("--seed", seed);
  train_cmd->add_option("--member", member);

  auto* fuse_cmd = app.add_subcommand("fuse", "fuse k >= 2 checkpoints");
  fuse_cmd->add_option("--method", method)->check(CLI::IsMember({"nt", "nt-iter", "nt-rec", "avg", "align"}));
  fuse_cmd->add_option("--in", inputs)->required();
  fuse_cmd->add_option("--sparsity", sparsity);
  fuse_cmd->add_option("--out", out_path)->required();

  auto* prune_cmd = app.add_subcommand("prune", "structured magnitude pruning");
  prune_cmd->add_option("--in", inputs)->required()->expected(1);
  auto* kc = prune_cmd->add_option("--keep-counts", keep_counts)->delimiter(',');
  auto* sp = prune_cmd->add_option("--sparsity", sparsity);
  kc->excludes(sp);
  prune_cmd->add_option("--out", out_path)->required();

  auto* eval_cmd = app.add_subcommand("eval", "test accuracy of a checkpoint");
  eval_cmd->add_option("--in", inputs)->required()->expected(1);
  eval_cmd->add_option("--data", data)->required();

  auto* distill_cmd = app.add_subcommand("distill", "distill an ensemble teacher into a student");
  distill_cmd->add_option("--student", student)->required();
  distill_cmd->add_option("--teachers", teachers)->required();
  distill_cmd->add_option("--data", data)->required();
  distill_cmd->add_option("--temperature", temperature);
  distill_cmd->add_option("--soft-weight", soft_weight);
  distill_cmd->add_option("--epochs", epochs);
  distill_cmd->add_option("--out", out_path);

  auto* exp_cmd = app.add_subcommand("experiment", "run an experiment spec and write its reports");
  exp_cmd->add_option("--spec", spec_path)->required();
  exp_cmd->add_option("--out", out_path)->required();

  auto* report_cmd = app.add_subcommand("report", "render a report directory");
  report_cmd->add_option("--in", in_dir)->required();
  report_cmd->add_option("--format", format)->check(CLI::IsMember({"csv", "json", "svg"}));
  report_cmd->add_option("--out", out_path);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "ntfuse: " << e.what() << "\n" << kSynopsis;
    return kExitUsage;
  }

  try {
    if (*train_cmd) {
      const ExperimentSpec spec = load_experiment_spec(spec_path);
      const Splits splits = load_dataset(spec.dataset);
      const auto arch = spec.arch.build(splits.train.sample_shape(), splits.train.num_classes);
      const TrainedMember m = train_member(arch, splits, spec.member_train, seed, member);
      CheckpointMeta meta{member_seed(seed, member), spec.member_train.epochs, {{"test_accuracy", m.accuracy}}};
      save_checkpoint(m.net, out_path, meta);
      out << json{{"checkpoint", out_path}, {"test_accuracy", canonical(m.accuracy)}}.dump() << "\n";
    } else if (*fuse_cmd) {
      if (inputs.size() < 2) usage("fuse needs at least two --in checkpoints (k >= 2)");
      const auto members = load_all(inputs);
      FusionPlan plan;
      plan.method = fusion_method_from_string(method);
      plan.sparsity = sparsity;
      save_checkpoint(fuse(members, plan), out_path);
    } else if (*prune_cmd) {
      if (keep_counts.empty() && !sparsity) usage("prune needs --keep-counts or --sparsity");
      const Network net = load_checkpoint(inputs.front());
      const KeepPolicy policy = keep_counts.empty() ? KeepPolicy::with_sparsity(*sparsity)
                                                    : KeepPolicy::with_keep_counts(keep_counts);
      save_checkpoint(magnitude_prune(net, policy), out_path);
    } else if (*eval_cmd) {
      const Network net = load_checkpoint(inputs.front());
      print_eval(out, evaluate(net, load_dataset(descriptor_arg(data)).test));
    } else if (*distill_cmd) {
      if (teachers.empty()) usage("distill needs at least one teacher");
      const Splits splits = load_dataset(descriptor_arg(data));
      const auto ts = load_all(teachers);
      TrainConfig cfg;
      cfg.epochs = epochs;
      KdConfig kd{temperature, soft_weight};
      const TrainResult r = distill(load_checkpoint(student), ts, splits.train, splits.test, cfg, kd);
      if (!out_path.empty()) {
        const double acc = r.history.records.empty() ? 0.0 : r.history.records.back().test_accuracy;
        save_checkpoint(r.net, out_path, {0, epochs, {{"test_accuracy", acc}}});
      }
      print_eval(out, evaluate(r.net, splits.test));
    } else if (*exp_cmd) {
      const ExperimentSpec spec = load_experiment_spec(spec_path);
      const auto reports = run_experiment(spec);
      emit_report(reports, out_path);
      write_text(fs::path(out_path) / "spec.json", spec.to_json().dump(2) + "\n");
      for (const auto& r : reports) {
        const Aggregate a = r.aggregate();
        out << r.method << ": immediate " << format_value(a.immediate_acc.mean) << " best "
            << format_value(a.best_finetuned_acc.mean) << " (best member "
            << format_value(a.best_member_acc.mean) << ", ensemble " << format_value(a.ensemble_acc.mean)
            << ")\n";
      }
    } else if (*report_cmd) {
      const std::string text = render(read_report_dir(in_dir), report_format_from_string(format));
      if (out_path.empty()) {
        out << text;
      } else {
        write_text(out_path, text);
      }
    }
  } catch (const Error& e) {
    err << "ntfuse: " << e.what() << "\n";
    if (e.kind() == ErrorKind::Usage) {
      err << kSynopsis;
      return kExitUsage;
    }
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "ntfuse: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace nt
