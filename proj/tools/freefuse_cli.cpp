#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "freefuse/commands.hpp"

namespace {

void add_common(CLI::App* cmd, freefuse::cli::CommonOptions& common) {
  cmd->add_option("--config", common.config, "Run config (key = value lines)");
  cmd->add_option("--seed", common.seed, "Override the config seed");
  cmd->add_option("--out", common.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace freefuse::cli;
  CLI::App app{"freefuse: training-free subject masks and masked multi-LoRA fusion on a toy DiT"};
  app.require_subcommand(1);

  DeriveMaskOptions derive;
  auto* derive_cmd = app.add_subcommand("derive-mask", "Derive subject masks from attention tensors");
  add_common(derive_cmd, derive.common);
  derive_cmd->add_option("--qtext", derive.qtext, "Text queries [N_text,D] or [H,N_text,D_h]");
  derive_cmd->add_option("--kimg", derive.kimg, "Image keys [N_img,D] or [H,N_img,D_h]");
  derive_cmd->add_option("--aself", derive.aself, "Image self-attention map [N_img,N_img]");
  derive_cmd->add_option("--across", derive.across, "Precomputed cross-attention map [N_text,N_img]");
  derive_cmd->add_option("--x0", derive.x0, "Predicted sample [H,W] or [H,W,C] in [0,1]");
  derive_cmd->add_option("--subject", derive.subjects, "Subject span id:i1,i2,... (repeatable)");

  RunToyOptions run;
  auto* run_cmd = app.add_subcommand("run-toy", "Run the two-stage pipeline on the toy model");
  add_common(run_cmd, run.common);

  DiagnoseOptions diagnose;
  auto* diag_cmd = app.add_subcommand("diagnose", "Conflict map, locality and equivalence error");
  add_common(diag_cmd, diagnose.common);
  diag_cmd->add_option("--subjects", diagnose.subjects, "Two subject ids")->delimiter(',');
  diag_cmd->add_option("--block", diagnose.block, "Block whose output delta is compared");
  diag_cmd->add_flag("--locality-sweep", diagnose.locality_sweep,
                     "Print the engineered locality sweep (0.5, 0.9, 0.99)");

  AblateOptions ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "L2 output change per disabled attachment point");
  add_common(ablate_cmd, ablate.common);
  ablate_cmd->add_option("--lora", ablate.lora, "Adapter directory (manifest.txt + tensors)");
  ablate_cmd->add_option("--toggle", ablate.toggles, "Comma-separated attachment points")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (*derive_cmd) return cmd_derive_mask(derive, std::cout, std::cerr);
  if (*run_cmd) return cmd_run_toy(run, std::cout, std::cerr);
  if (*diag_cmd) return cmd_diagnose(diagnose, std::cout, std::cerr);
  return cmd_ablate(ablate, std::cout, std::cerr);
}
