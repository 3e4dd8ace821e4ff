#pragma once

// CLI subcommands as plain functions: options in, key=value lines on `out`,
// diagnostics on `err`, exit code back (0 ok, 2 usage/parse/io, 3 shape,
// 4 numeric-degenerate).

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "freefuse/ablation.hpp"
#include "freefuse/attnmap.hpp"
#include "freefuse/config.hpp"
#include "freefuse/error.hpp"
#include "freefuse/fixtures.hpp"
#include "freefuse/lora.hpp"
#include "freefuse/superpixel.hpp"
#include "freefuse/tensor_io.hpp"
#include "freefuse/text.hpp"
#include "freefuse/toydit.hpp"

namespace freefuse::cli {

namespace fs = std::filesystem;

struct CommonOptions {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
};

struct DeriveMaskOptions {
  CommonOptions common;
  std::optional<fs::path> qtext, kimg, aself, across, x0;
  std::vector<std::string> subjects;  // "id:i1,i2"; falls back to the config's subjects
};

struct RunToyOptions {
  CommonOptions common;
};

struct DiagnoseOptions {
  CommonOptions common;
  std::vector<std::string> subjects;  // two ids; defaults to the first two configured
  std::optional<std::size_t> block;
  bool locality_sweep = false;
};

struct AblateOptions {
  CommonOptions common;
  std::optional<fs::path> lora;
  std::string toggles = "Q,K,V,FF";
};

namespace detail {

inline config::RunConfig resolve_config(const CommonOptions& opts) {
  config::RunConfig c = opts.config ? config::load_run_config(*opts.config) : config::RunConfig{};
  if (opts.seed) c.seed = *opts.seed;
  if (opts.out) c.output_dir = opts.out->string();
  c.validate();
  return c;
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    err << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "error (io): " << e.what() << "\n";
    return 2;
  }
}

inline PixelGrid pixel_grid_from_tensor(const DenseTensor& t, const std::string& name) {
  if (t.rank() == 2) return PixelGrid(t.dim(0), t.dim(1), 1, t.values());
  require(t.rank() == 3 && (t.dim(2) == 1 || t.dim(2) == 3), ErrorCode::shape,
          name + " must be [H,W] or [H,W,C] with C in {1,3}, got " + shape_string(t.shape()));
  return PixelGrid(t.dim(0), t.dim(1), t.dim(2), t.values());
}

inline DenseTensor pixel_grid_tensor(const PixelGrid& g) {
  return DenseTensor(Shape{g.height(), g.width(), g.channels()},
                     std::vector<float>(g.values().begin(), g.values().end()));
}

// Channel mean as a single-channel grid.
inline PixelGrid gray(const PixelGrid& g) {
  std::vector<float> v(g.pixels());
  for (std::size_t p = 0; p < g.pixels(); ++p) {
    double acc = 0.0;
    for (std::size_t c = 0; c < g.channels(); ++c) acc += g.values()[p * g.channels() + c];
    v[p] = static_cast<float>(acc / static_cast<double>(g.channels()));
  }
  return PixelGrid(g.height(), g.width(), 1, std::move(v));
}

inline PixelGrid token_mask_image(const toydit::ToyModelConfig& cfg, const lora::SubjectMask& m) {
  return PixelGrid(cfg.grid_h, cfg.grid_w, 1, std::vector<float>(m.begin(), m.end()));
}

inline double mask_area(const std::vector<std::uint8_t>& mask) {
  std::size_t n = 0;
  for (auto v : mask) n += v;
  return static_cast<double>(n) / static_cast<double>(mask.size());
}

inline void write_text(const fs::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << body;
}

inline std::string step_dir(std::size_t t) {
  std::ostringstream s;
  s << "step_" << std::setw(3) << std::setfill('0') << t;
  return s.str();
}

struct ToyRun {
  config::RunConfig cfg;
  toydit::ToyModel model;
  DenseTensor prompt;
  std::vector<toydit::Subject> subjects;
  toydit::GenerationTrace trace;
};

inline ToyRun run_toy(const config::RunConfig& cfg) {
  ToyRun run{cfg, toydit::build_toy_model(cfg.model, cfg.seed),
             toydit::prompt_embedding(cfg.model, cfg.seed), config::build_subjects(cfg), {}};
  run.trace = toydit::run_pipeline(run.model, run.prompt, toydit::noise_latent(cfg.model, cfg.seed),
                                   run.subjects, cfg.pipeline());
  return run;
}

struct SubjectStats {
  double area = 0.0;
  std::optional<double> locality;
  double equivalence_error = 0.0;
};

inline SubjectStats subject_stats(const ToyRun& run, std::size_t l) {
  const auto& ex = *run.trace.extraction;
  const auto& mask = ex.token_masks[l];
  SubjectStats s;
  s.area = mask_area(ex.pixel_masks.masks[l]);
  if (std::any_of(mask.begin(), mask.end(), [](auto v) { return v != 0; })) {
    s.locality = toydit::locality_ratio(ex.trace.a_self, mask);
  }
  s.equivalence_error = toydit::masked_equivalence_error(
      run.model, run.prompt, run.trace.steps[ex.step].latent, run.subjects[l].lora, mask);
  return s;
}

inline std::string optional_number(const std::optional<double>& v) {
  return v ? text::format_number(*v) : std::string("nan");
}

inline void report_warnings(const toydit::GenerationTrace& trace, std::ostream& err) {
  for (const auto& w : trace.warnings) {
    err << "warning subject=" << w.subject << " message=\"" << w.message << "\"\n";
  }
}

}  // namespace detail

/// Stage 1 from tensor files: cross map (or Q_text/K_img), optional self map, x0 image.
/// Writes mask_<id>.pgm per subject and labeling.fft.
inline int cmd_derive_mask(const DeriveMaskOptions& opts, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const config::RunConfig cfg = detail::resolve_config(opts.common);
    const attn::GridShape grid = cfg.model.grid();

    std::vector<attn::SubjectTokenSpan> spans;
    for (const auto& s : opts.subjects) spans.push_back(attn::parse_span(s));
    if (spans.empty()) {
      for (const auto& s : cfg.subjects) spans.push_back({s.id, s.tokens});
    }
    require(!spans.empty(), ErrorCode::parse, "no subjects given (use --subject id:i1,i2)");
    require(opts.x0.has_value(), ErrorCode::parse, "missing --x0");

    std::optional<attn::AttentionMap> a_cross;
    if (opts.across) {
      require(!opts.qtext && !opts.kimg, ErrorCode::parse,
              "give either --across or --qtext/--kimg, not both");
      a_cross.emplace(io::load_tensor(*opts.across));
    } else {
      require(opts.qtext.has_value(), ErrorCode::parse, "missing --qtext (or --across)");
      require(opts.kimg.has_value(), ErrorCode::parse, "missing --kimg (or --across)");
      const DenseTensor q = io::load_tensor(*opts.qtext);
      const DenseTensor k = io::load_tensor(*opts.kimg);
      a_cross.emplace(attn::compute_cross_attention(q, k));
    }
    require(a_cross->cols() == grid.tokens(), ErrorCode::shape,
            "cross attention has " + std::to_string(a_cross->cols()) + " image tokens, grid " +
                std::to_string(grid.grid_h) + "x" + std::to_string(grid.grid_w) + " has " +
                std::to_string(grid.tokens()));
    std::optional<attn::AttentionMap> a_self;
    if (opts.aself) a_self.emplace(io::load_tensor(*opts.aself));

    const PixelGrid x0 = detail::pixel_grid_from_tensor(io::load_tensor(*opts.x0), opts.x0->string());
    const auto maps = attn::subject_attention_maps(*a_cross, a_self ? &*a_self : nullptr, grid,
                                                   spans, cfg.sink, cfg.top_fraction);
    const auto labeling = superpixel::slic_segment(x0, cfg.slic);
    std::vector<superpixel::SubjectMap> pixel_maps;
    for (std::size_t l = 0; l < spans.size(); ++l) {
      pixel_maps.push_back({spans[l].lora_id,
                            superpixel::upsample_map(maps[l], grid, x0.height(), x0.width())});
    }
    const auto masks = superpixel::vote_superpixels(pixel_maps, labeling);

    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    io::save_tensor(superpixel::labeling_tensor(labeling), dir / "labeling.fft");
    out << "regions=" << labeling.n_regions << "\n";
    for (std::size_t l = 0; l < spans.size(); ++l) {
      io::write_pgm(superpixel::mask_image(masks, l), dir / ("mask_" + spans[l].lora_id + ".pgm"));
      out << "mask_area." << spans[l].lora_id << "="
          << text::format_number(detail::mask_area(masks.masks[l])) << "\n";
    }
    return 0;
  });
}

/// Full two-stage toy run, dumped under output_dir:
///   manifest.txt, config.txt, final_latent.fft,
///   step_NNN/{latent.fft, x0.fft, x0.pgm, mask_<id>.pgm (from mask_step on)},
///   extraction/{labeling.fft, map_<id>.fft, token_mask_<id>.pgm}
inline int cmd_run_toy(const RunToyOptions& opts, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const config::RunConfig cfg = detail::resolve_config(opts.common);
    const detail::ToyRun run = detail::run_toy(cfg);
    detail::report_warnings(run.trace, err);

    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    // output_dir is recorded as "." so runs into different directories compare equal
    config::RunConfig recorded = cfg;
    recorded.output_dir = ".";
    detail::write_text(dir / "config.txt", config::serialize_run_config(recorded));
    std::ostringstream manifest;
    manifest << "n_steps=" << cfg.model.n_steps << "\n";
    manifest << "mask_step=" << cfg.model.mask_step << "\n";
    manifest << "mask_block=" << cfg.model.mask_block << "\n";
    manifest << "seed=" << cfg.seed << "\n";
    manifest << "subjects=";
    for (std::size_t l = 0; l < run.subjects.size(); ++l) {
      manifest << (l ? "," : "") << run.subjects[l].span.lora_id;
    }
    manifest << "\n";

    for (std::size_t t = 0; t < run.trace.steps.size(); ++t) {
      const auto& step = run.trace.steps[t];
      const fs::path sd = dir / detail::step_dir(t);
      fs::create_directories(sd);
      io::save_tensor(step.latent, sd / "latent.fft");
      io::save_tensor(detail::pixel_grid_tensor(step.x0), sd / "x0.fft");
      io::write_pgm(detail::gray(step.x0), sd / "x0.pgm");
      manifest << "step=" << t << " dir=" << detail::step_dir(t);
      if (step.masks) {
        manifest << " masks=";
        for (std::size_t l = 0; l < step.masks->lora_ids.size(); ++l) {
          io::write_pgm(superpixel::mask_image(*step.masks, l),
                        sd / ("mask_" + step.masks->lora_ids[l] + ".pgm"));
          manifest << (l ? "," : "") << step.masks->lora_ids[l];
        }
      }
      if (run.trace.extraction && run.trace.extraction->step == t) {
        manifest << " extraction_block=" << run.trace.extraction->block;
      }
      manifest << "\n";
    }
    io::save_tensor(run.trace.final_latent, dir / "final_latent.fft");

    std::ostringstream summary;
    summary << "subjects=" << run.subjects.size();
    if (run.trace.extraction) {
      const auto& ex = *run.trace.extraction;
      const fs::path ed = dir / "extraction";
      fs::create_directories(ed);
      io::save_tensor(superpixel::labeling_tensor(ex.labeling), ed / "labeling.fft");
      io::save_tensor(detail::pixel_grid_tensor(ex.x0), ed / "x0.fft");
      for (std::size_t l = 0; l < run.subjects.size(); ++l) {
        const std::string& id = run.subjects[l].span.lora_id;
        io::save_tensor(ex.subject_maps[l], ed / ("map_" + id + ".fft"));
        io::write_pgm(detail::token_mask_image(cfg.model, ex.token_masks[l]),
                      ed / ("token_mask_" + id + ".pgm"));
        const auto stats = detail::subject_stats(run, l);
        summary << " mask_area." << id << "=" << text::format_number(stats.area)
                << " locality." << id << "=" << detail::optional_number(stats.locality)
                << " equiv_error." << id << "=" << text::format_number(stats.equivalence_error);
      }
    }
    detail::write_text(dir / "manifest.txt", manifest.str());
    out << summary.str() << "\n";
    return 0;
  });
}

/// Conflict and approximation diagnostics for two subjects of a toy run.
inline int cmd_diagnose(const DiagnoseOptions& opts, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const config::RunConfig cfg = detail::resolve_config(opts.common);
    if (opts.locality_sweep) {
      std::size_t i = 0;
      for (double target : {0.5, 0.9, 0.99}) {
        const auto fx = fixtures::make_locality_fixture(cfg.model, cfg.seed, target);
        const auto step = toydit::forward_step(fx.model, fx.text, fx.latent, {}, {0});
        out << "sweep." << i << ".target=" << text::format_number(target) << "\n";
        out << "sweep." << i << ".locality="
            << text::format_number(toydit::locality_ratio(step.traces.at(0).a_self, fx.mask)) << "\n";
        out << "sweep." << i << ".equiv_error="
            << text::format_number(toydit::masked_equivalence_error(fx.model, fx.text, fx.latent,
                                                                    fx.lora, fx.mask))
            << "\n";
        ++i;
      }
      if (opts.subjects.empty() && cfg.subjects.size() < 2) return 0;
    }

    std::vector<std::string> ids = opts.subjects;
    if (ids.empty()) {
      for (std::size_t l = 0; l < std::min<std::size_t>(2, cfg.subjects.size()); ++l) {
        ids.push_back(cfg.subjects[l].id);
      }
    }
    require(ids.size() == 2, ErrorCode::parse, "diagnose needs exactly two subject ids");
    std::vector<std::size_t> index;
    for (const auto& id : ids) {
      const auto it = std::find_if(cfg.subjects.begin(), cfg.subjects.end(),
                                   [&](const auto& s) { return s.id == id; });
      require(it != cfg.subjects.end(), ErrorCode::parse, "unknown subject id '" + id + "'");
      index.push_back(static_cast<std::size_t>(it - cfg.subjects.begin()));
    }
    const std::size_t block = opts.block.value_or(cfg.model.mask_block);
    require(block < cfg.model.n_blocks, ErrorCode::parse,
            "block " + std::to_string(block) + " does not exist");

    const detail::ToyRun run = detail::run_toy(cfg);
    detail::report_warnings(run.trace, err);
    const auto& ex = *run.trace.extraction;
    const DenseTensor& latent = run.trace.steps[ex.step].latent;
    const lora::SubjectMask ones = lora::all_ones_mask(cfg.model.n_img());
    std::vector<DenseTensor> deltas;
    for (std::size_t l : index) {
      const toydit::ActiveLora solo[] = {{&run.subjects[l].lora, ones, std::nullopt}};
      deltas.push_back(toydit::block_output_delta(run.model, run.prompt, latent, solo, block));
    }
    const DenseTensor cosine = toydit::conflict_cosine_map(deltas[0], deltas[1]);
    std::vector<float> heat(cosine.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < cosine.size(); ++i) {
      heat[i] = static_cast<float>((static_cast<double>(cosine[i]) + 1.0) / 2.0);
      mean += cosine[i];
    }
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    io::write_pgm(PixelGrid(cfg.model.grid_h, cfg.model.grid_w, 1, std::move(heat)),
                  dir / "cosine.pgm");
    out << "block=" << block << "\n";
    out << "cosine.mean=" << text::format_number(mean / static_cast<double>(cosine.size())) << "\n";
    for (std::size_t l : index) {
      const auto stats = detail::subject_stats(run, l);
      const std::string& id = run.subjects[l].span.lora_id;
      out << "locality." << id << "=" << detail::optional_number(stats.locality) << "\n";
      out << "equiv_error." << id << "=" << text::format_number(stats.equivalence_error) << "\n";
    }
    return 0;
  });
}

/// L2 output change when each listed attachment point is switched off.
inline int cmd_ablate(const AblateOptions& opts, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const config::RunConfig cfg = detail::resolve_config(opts.common);
    const auto toggles = lora::parse_attachment_list(opts.toggles);
    const toydit::ToyModel model = toydit::build_toy_model(cfg.model, cfg.seed);
    lora::LoraSet set;
    if (opts.lora) {
      set = lora::load_lora_set(*opts.lora);
    } else if (!cfg.subjects.empty()) {
      set = config::subject_lora(cfg, 0);
    } else {
      set = lora::random_lora_set("ablate", cfg.model.n_blocks, cfg.model.d_model, cfg.lora_rank,
                                  cfg.lora_alpha, cfg.lora_attach, derive_seed(cfg.seed, 99),
                                  cfg.lora_scale);
    }
    for (lora::Attachment a : toggles) {
      const lora::Attachment one[] = {a};
      out << "l2." << lora::to_string(a) << "="
          << text::format_number(lora::layer_ablation_l2(model, set, one, cfg.seed)) << "\n";
    }
    return 0;
  });
}

}  // namespace freefuse::cli
