#pragma once

// Run configuration: UTF-8 text, one `key = value` per line, `#` comments.
// Unknown keys are rejected; missing keys keep the defaults below.
//
//   seed, output_dir
//   n_blocks, d_model, n_heads, n_text, grid_h, grid_w, n_steps, mask_step, mask_block
//   sink.p, sink.border_width, top_fraction, mask_text_tokens
//   slic.n_segments (integer or "auto"), slic.compactness, slic.sigma, slic.iterations,
//   slic.color_scale
//   lora.rank, lora.alpha, lora.scale, lora.attach (e.g. "Q,K,V,FF")
//   subject.<id>.tokens = i1,i2,...   (declares the subject)
//   subject.<id>.lora   = DIR         (adapter directory; otherwise generated)
//   subject.<id>.seed   = N           (seed for the generated adapter)
//   subject.<id>.scale  = x           (multiplies lora.scale for this subject)

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "freefuse/attnmap.hpp"
#include "freefuse/error.hpp"
#include "freefuse/lora.hpp"
#include "freefuse/superpixel.hpp"
#include "freefuse/text.hpp"
#include "freefuse/toydit.hpp"

namespace freefuse::config {

struct SubjectConfig {
  std::string id;
  std::vector<std::size_t> tokens;
  std::optional<std::string> lora_dir;
  std::optional<std::uint64_t> seed;
  double scale = 1.0;

  friend bool operator==(const SubjectConfig&, const SubjectConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::string output_dir = "freefuse_out";
  toydit::ToyModelConfig model;
  attn::SinkFilterConfig sink;
  superpixel::SlicParams slic;
  double top_fraction = 0.01;
  bool mask_text_tokens = false;
  std::size_t lora_rank = 4;
  double lora_alpha = 4.0;
  double lora_scale = 0.1;
  std::vector<lora::Attachment> lora_attach{lora::Attachment::Q, lora::Attachment::K,
                                            lora::Attachment::V, lora::Attachment::FF};
  std::vector<SubjectConfig> subjects;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  void validate() const {
    model.validate();
    sink.validate();
    slic.validate();
    require(top_fraction > 0.0 && top_fraction <= 1.0, ErrorCode::invalid_argument,
            "top_fraction must lie in (0, 1]");
    require(lora_rank >= 1, ErrorCode::invalid_argument, "lora.rank must be >= 1");
    std::vector<attn::SubjectTokenSpan> spans;
    for (const auto& s : subjects) {
      for (std::size_t idx : s.tokens) {
        require(idx < model.n_text, ErrorCode::invalid_argument,
                "subject." + s.id + ".tokens: index " + std::to_string(idx) + " is not below n_text " +
                    std::to_string(model.n_text));
      }
      spans.push_back({s.id, s.tokens});
    }
    attn::validate_spans(spans, model.n_text);
  }

  toydit::PipelineConfig pipeline() const {
    return {sink, slic, top_fraction, mask_text_tokens};
  }
};

namespace detail {

inline bool valid_subject_id(std::string_view id) {
  return !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

inline RunConfig parse_run_config(std::string_view body, const std::string& source = "<config>") {
  RunConfig c;
  auto subject = [&](const std::string& id) -> SubjectConfig& {
    for (auto& s : c.subjects) {
      if (s.id == id) return s;
    }
    c.subjects.push_back({id, {}, std::nullopt, std::nullopt, 1.0});
    return c.subjects.back();
  };
  auto size = [](const std::string& v, const std::string& k) { return text::parse_size(v, k); };
  auto number = [](const std::string& v, const std::string& k) { return text::parse_double(v, k); };

  for (const auto& [key, value] : text::parse_key_values(body, source)) {
    if (key == "seed") c.seed = size(value, key);
    else if (key == "output_dir") c.output_dir = value;
    else if (key == "n_blocks") c.model.n_blocks = size(value, key);
    else if (key == "d_model") c.model.d_model = size(value, key);
    else if (key == "n_heads") c.model.n_heads = size(value, key);
    else if (key == "n_text") c.model.n_text = size(value, key);
    else if (key == "grid_h") c.model.grid_h = size(value, key);
    else if (key == "grid_w") c.model.grid_w = size(value, key);
    else if (key == "n_steps") c.model.n_steps = size(value, key);
    else if (key == "mask_step") c.model.mask_step = size(value, key);
    else if (key == "mask_block") c.model.mask_block = size(value, key);
    else if (key == "sink.p") c.sink.p = number(value, key);
    else if (key == "sink.border_width") c.sink.border_width = size(value, key);
    else if (key == "top_fraction") c.top_fraction = number(value, key);
    else if (key == "mask_text_tokens") c.mask_text_tokens = text::parse_bool(value, key);
    else if (key == "slic.n_segments") {
      c.slic.n_segments = value == "auto" ? std::nullopt : std::optional(size(value, key));
    } else if (key == "slic.compactness") c.slic.compactness = number(value, key);
    else if (key == "slic.sigma") c.slic.sigma = number(value, key);
    else if (key == "slic.iterations") c.slic.iterations = size(value, key);
    else if (key == "slic.color_scale") c.slic.color_scale = number(value, key);
    else if (key == "lora.rank") c.lora_rank = size(value, key);
    else if (key == "lora.alpha") c.lora_alpha = number(value, key);
    else if (key == "lora.scale") c.lora_scale = number(value, key);
    else if (key == "lora.attach") c.lora_attach = lora::parse_attachment_list(value);
    else if (key.starts_with("subject.")) {
      const auto dot = key.rfind('.');
      const std::string id = key.substr(8, dot > 8 ? dot - 8 : 0);
      const std::string field = key.substr(dot + 1);
      require(dot > 8 && detail::valid_subject_id(id), ErrorCode::parse,
              source + ": bad subject key '" + key + "'");
      if (field == "tokens") {
        auto& s = subject(id);
        s.tokens.clear();
        for (const auto& item : text::split(value, ',')) s.tokens.push_back(size(item, key));
        require(!s.tokens.empty(), ErrorCode::parse, source + ": " + key + " is empty");
      } else if (field == "lora") subject(id).lora_dir = value;
      else if (field == "seed") subject(id).seed = size(value, key);
      else if (field == "scale") subject(id).scale = number(value, key);
      else fail(ErrorCode::parse, source + ": unknown key '" + key + "'");
    } else {
      fail(ErrorCode::parse, source + ": unknown key '" + key + "'");
    }
  }
  for (const auto& s : c.subjects) {
    require(!s.tokens.empty(), ErrorCode::parse,
            source + ": subject '" + s.id + "' needs subject." + s.id + ".tokens");
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open config " + path.string());
  std::stringstream body;
  body << in.rdbuf();
  return parse_run_config(body.str(), path.string());
}

/// Canonical form: every key, fixed order, shortest round-trip numbers.
inline std::string serialize_run_config(const RunConfig& c) {
  std::ostringstream o;
  auto num = text::format_number;
  o << "seed = " << c.seed << "\n";
  o << "output_dir = " << c.output_dir << "\n";
  o << "n_blocks = " << c.model.n_blocks << "\n";
  o << "d_model = " << c.model.d_model << "\n";
  o << "n_heads = " << c.model.n_heads << "\n";
  o << "n_text = " << c.model.n_text << "\n";
  o << "grid_h = " << c.model.grid_h << "\n";
  o << "grid_w = " << c.model.grid_w << "\n";
  o << "n_steps = " << c.model.n_steps << "\n";
  o << "mask_step = " << c.model.mask_step << "\n";
  o << "mask_block = " << c.model.mask_block << "\n";
  o << "sink.p = " << num(c.sink.p) << "\n";
  o << "sink.border_width = " << c.sink.border_width << "\n";
  o << "top_fraction = " << num(c.top_fraction) << "\n";
  o << "mask_text_tokens = " << (c.mask_text_tokens ? "true" : "false") << "\n";
  o << "slic.n_segments = "
    << (c.slic.n_segments ? std::to_string(*c.slic.n_segments) : std::string("auto")) << "\n";
  o << "slic.compactness = " << num(c.slic.compactness) << "\n";
  o << "slic.sigma = " << num(c.slic.sigma) << "\n";
  o << "slic.iterations = " << c.slic.iterations << "\n";
  o << "slic.color_scale = " << num(c.slic.color_scale) << "\n";
  o << "lora.rank = " << c.lora_rank << "\n";
  o << "lora.alpha = " << num(c.lora_alpha) << "\n";
  o << "lora.scale = " << num(c.lora_scale) << "\n";
  o << "lora.attach = ";
  for (std::size_t i = 0; i < c.lora_attach.size(); ++i) {
    o << (i ? "," : "") << lora::to_string(c.lora_attach[i]);
  }
  o << "\n";
  for (const auto& s : c.subjects) {
    o << "subject." << s.id << ".tokens = " << detail::join_sizes(s.tokens) << "\n";
    if (s.lora_dir) o << "subject." << s.id << ".lora = " << *s.lora_dir << "\n";
    if (s.seed) o << "subject." << s.id << ".seed = " << *s.seed << "\n";
    o << "subject." << s.id << ".scale = " << num(s.scale) << "\n";
  }
  return o.str();
}

/// Adapter for the index-th subject: loaded from its directory, or generated from
/// its seed (default derived from the run seed).
inline lora::LoraSet subject_lora(const RunConfig& c, std::size_t index) {
  const SubjectConfig& s = c.subjects.at(index);
  if (s.lora_dir) {
    lora::LoraSet set = lora::load_lora_set(*s.lora_dir);
    set.id = s.id;
    return set;
  }
  return lora::random_lora_set(s.id, c.model.n_blocks, c.model.d_model, c.lora_rank, c.lora_alpha,
                               c.lora_attach, s.seed.value_or(derive_seed(c.seed, 100 + index)),
                               c.lora_scale * s.scale);
}

inline std::vector<toydit::Subject> build_subjects(const RunConfig& c) {
  std::vector<toydit::Subject> out;
  for (std::size_t i = 0; i < c.subjects.size(); ++i) {
    out.push_back({{c.subjects[i].id, c.subjects[i].tokens}, subject_lora(c, i)});
  }
  return out;
}

}  // namespace freefuse::config
