#include <cstdlib>
#include <string>

#include <CLI11.hpp>

#include "sspformer/cli/commands.hpp"
#include "sspformer/sspformer.hpp"

namespace {

void apply_thread_env() {
  const char* env = std::getenv("SSPF_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == nullptr || *end != '\0' || n < 1) throw sspf::ConfigError(std::string("bad SSPF_THREADS value '") + env + "'");
  sspf::set_thread_cap(static_cast<std::size_t>(n));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sspf: spectral self-supervised pretraining pipeline"};
  app.require_subcommand(1);

  sspf::PhantomArgs ph;
  CLI::App* phantom = app.add_subcommand("phantom", "generate synthetic phantom slices + labels");
  phantom->add_option("--count", ph.count, "number of phantoms");
  phantom->add_option("--size", ph.size, "square slice size");
  phantom->add_option("--seed", ph.seed, "generation seed");
  phantom->add_option("--out", ph.out, "output directory")->required();

  sspf::AugmentArgs au;
  CLI::App* augment = app.add_subcommand("augment", "preview masking / k-space noise on a tensor file");
  augment->add_option("--in", au.in, "input FTS1 tensor, [H,W] or [C,H,W]")->required();
  augment->add_option("--mode", au.mode, "mask | noise | both");
  augment->add_option("--p-base", au.p_base, "base masking probability");
  augment->add_option("--lambda", au.lambda, "noise scale lambda");
  augment->add_option("--sigma", au.sigma, "noise sigma");
  augment->add_option("--seed", au.seed, "augmentation seed");
  augment->add_option("--out", au.out, "output directory")->required();
  augment->add_option("--patch", au.patch, "patch size");
  augment->add_option("--tau", au.tau, "edge-energy quantile threshold");
  augment->add_option("--weight", au.weight, "radial weight: linear | quadratic");

  sspf::PretrainArgs pt;
  std::uint64_t pt_seed = 0;
  CLI::App* pretrain = app.add_subcommand("pretrain", "self-supervised pretraining on generated phantoms");
  pretrain->add_option("--config", pt.config, "key=value run config file");
  pretrain->add_option("--out-dir", pt.out_dir, "run directory")->required();
  pretrain->add_option("--sweep", pt.sweep, "parameter sweep, e.g. lambda=0,0.1,0.2,0.3,0.5");
  pretrain->add_flag("--ablate", pt.ablate, "run the four-row module ablation grid");
  CLI::Option* pt_seed_opt = pretrain->add_option("--seed", pt_seed, "override train.seed");

  sspf::FinetuneArgs ft;
  std::uint64_t ft_seed = 0;
  CLI::App* finetune = app.add_subcommand("finetune", "asymmetric fine-tuning from a pretrain checkpoint");
  finetune->add_option("--config", ft.config, "key=value run config file");
  finetune->add_option("--task", ft.task, "sr2 | sr3 | sr4 | denoise | segment")->required();
  finetune->add_option("--checkpoint", ft.checkpoint, "pretrain checkpoint (.sspf)")->required();
  finetune->add_option("--out-dir", ft.out_dir, "run directory")->required();
  CLI::Option* ft_seed_opt = finetune->add_option("--seed", ft_seed, "override train.seed");

  sspf::EvalArgs ev;
  CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint, emit metrics.csv");
  evalc->add_option("--config", ev.config, "key=value run config file");
  evalc->add_option("--task", ev.task, "sr2 | sr3 | sr4 | denoise | segment")->required();
  evalc->add_option("--checkpoint", ev.checkpoint, "checkpoint (.sspf)")->required();
  evalc->add_option("--out-dir", ev.out_dir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  return sspf::run_command([&] {
    apply_thread_env();
    if (phantom->parsed()) {
      sspf::cmd_phantom(ph);
    } else if (augment->parsed()) {
      sspf::cmd_augment(au);
    } else if (pretrain->parsed()) {
      if (pt_seed_opt->count() > 0) pt.seed = pt_seed;
      sspf::cmd_pretrain(pt);
    } else if (finetune->parsed()) {
      if (ft_seed_opt->count() > 0) ft.seed = ft_seed;
      sspf::cmd_finetune(ft);
    } else if (evalc->parsed()) {
      sspf::cmd_eval(ev);
    }
  });
}
