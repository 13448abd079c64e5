#pragma once

// Key-value run configuration for the CLI.
//
//   [data]      ToyDomainConfig scalars
//   [source]    source DomainAppearance
//   [target]    target DomainAppearance
//   [train]     TrainConfig
//   [detector]  DetectorConfig
//
// Colours are "r g b"; colour lists separate entries with commas. Every key is
// optional and unknown keys are rejected, so a typo cannot silently fall back
// to a default.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pargan/detect.hpp"
#include "pargan/train.hpp"

namespace pargan::cli {

struct RunConfig {
  ToyDomainConfig data = ToyDomainConfig::defaults();
  TrainConfig train;
  DetectorConfig detector;
};

namespace detail {

template <typename V>
void visit_appearance(const std::string& sec, DomainAppearance& a, V&& v) {
  v(sec + ".background", a.background);
  v(sec + ".figures", a.figures);
  v(sec + ".gain", a.gain);
  v(sec + ".bias", a.bias);
  v(sec + ".gain_jitter", a.gain_jitter);
  v(sec + ".noise", a.noise);
  v(sec + ".blur", a.blur);
}

// The one list of keys; reading and writing both walk it.
template <typename V>
void visit(RunConfig& c, V&& v) {
  v("data.seed", c.data.seed);
  v("data.size", c.data.size);
  v("data.n_images", c.data.n_images);
  v("data.min_figures", c.data.min_figures);
  v("data.max_figures", c.data.max_figures);
  v("data.min_figure_w", c.data.min_figure_w);
  v("data.max_figure_w", c.data.max_figure_w);
  v("data.min_figure_h", c.data.min_figure_h);
  v("data.max_figure_h", c.data.max_figure_h);
  visit_appearance("source", c.data.source, v);
  visit_appearance("target", c.data.target, v);

  auto& t = c.train;
  v("train.steps", t.steps);
  v("train.critic_updates", t.critic_updates);
  v("train.crop", t.crop);
  v("train.batch", t.batch);
  v("train.seed", t.seed);
  v("train.p_mode", t.p_mode);
  v("train.lr", t.optimizer.lr);
  v("train.beta1", t.optimizer.beta1);
  v("train.beta2", t.optimizer.beta2);
  v("train.critic_lr", t.critic_optimizer.lr);
  v("train.critic_beta1", t.critic_optimizer.beta1);
  v("train.critic_beta2", t.critic_optimizer.beta2);
  v("train.lambda_cyc", t.weights.lambda_cyc);
  v("train.lambda_id", t.weights.lambda_id);
  v("train.gp_coeff", t.weights.gp_coeff);
  v("train.generator_base", t.generator.base_channels);
  v("train.generator_res_blocks", t.generator.n_res_blocks);
  v("train.generator_down", t.generator.downsample_stages);
  v("train.critic_base", t.critic.base_channels);
  v("train.critic_layers", t.critic.n_layers);
  v("train.checkpoint_every", t.checkpoint_every);

  auto& d = c.detector;
  v("detector.steps", d.steps);
  v("detector.batch", d.batch);
  v("detector.seed", d.seed);
  v("detector.lr", d.optimizer.lr);
  v("detector.beta1", d.optimizer.beta1);
  v("detector.beta2", d.optimizer.beta2);
  v("detector.scale_min", d.scale_min);
  v("detector.scale_max", d.scale_max);
  v("detector.focal_alpha", d.focal.alpha);
  v("detector.focal_gamma", d.focal.gamma);
  v("detector.box_weight", d.box_weight);
  v("detector.width", d.spec.width);
  v("detector.anchor", d.spec.anchor);
}

template <typename N>
N parse_num(std::string_view s, const std::string& key) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  N v{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size()) {
    throw ParameterError("config key " + key + ": bad number '" + std::string(s) + "'");
  }
  return v;
}

inline Rgb parse_rgb(const std::string& s, const std::string& key) {
  std::istringstream in(s);
  std::vector<std::string> parts;
  for (std::string w; in >> w;) parts.push_back(w);
  if (parts.size() != 3) throw ParameterError("config key " + key + ": expected 3 components in '" + s + "'");
  return {parse_num<float>(parts[0], key), parse_num<float>(parts[1], key), parse_num<float>(parts[2], key)};
}

template <typename N>
std::string fmt(N v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline std::string fmt(const Rgb& c) { return fmt(c.r) + " " + fmt(c.g) + " " + fmt(c.b); }

struct Reader {
  const boost::property_tree::ptree& pt;
  std::set<std::string>& seen;

  template <typename F>
  void with(const std::string& key, F&& apply) {
    seen.insert(key);
    if (const auto v = pt.get_optional<std::string>(key)) apply(*v);
  }
  template <typename N>
  void operator()(const std::string& key, N& out) {
    with(key, [&](const std::string& s) { out = parse_num<N>(s, key); });
  }
  void operator()(const std::string& key, PMode& out) {
    with(key, [&](const std::string& s) { out = parse_p_mode(s); });
  }
  void operator()(const std::string& key, Rgb& out) {
    with(key, [&](const std::string& s) { out = parse_rgb(s, key); });
  }
  void operator()(const std::string& key, std::vector<Rgb>& out) {
    with(key, [&](const std::string& s) {
      out.clear();
      std::size_t start = 0;
      while (start <= s.size()) {
        const auto comma = s.find(',', start);
        out.push_back(parse_rgb(s.substr(start, comma - start), key));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
    });
  }
};

struct Writer {
  std::vector<std::pair<std::string, std::string>>& out;

  template <typename N>
  void operator()(const std::string& key, const N& v) { out.emplace_back(key, fmt(v)); }
  void operator()(const std::string& key, const PMode& v) { out.emplace_back(key, p_mode_name(v)); }
  void operator()(const std::string& key, const Rgb& v) { out.emplace_back(key, fmt(v)); }
  void operator()(const std::string& key, const std::vector<Rgb>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
    out.emplace_back(key, s);
  }
};

}  // namespace detail

/// Overlays the INI text on the defaults. Malformed files raise ParseError,
/// bad values and unknown keys ParameterError.
inline RunConfig parse_config(std::istream& in) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError(e.message(), e.line());
  }
  RunConfig c;
  std::set<std::string> known;
  detail::visit(c, detail::Reader{pt, known});
  for (const auto& [sec, body] : pt) {
    if (body.empty()) throw ParameterError("config key '" + sec + "' is outside any section");
    for (const auto& [key, _] : body) {
      if (!known.count(sec + "." + key)) throw ParameterError("unknown config key " + sec + "." + key);
    }
  }
  c.train.validate();
  c.detector.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path);
  return parse_config(in);
}

/// Every key with its effective value; parse_config(format_config(c)) == c.
inline std::string format_config(RunConfig c) {
  std::vector<std::pair<std::string, std::string>> kv;
  detail::visit(c, detail::Writer{kv});
  std::string out, section;
  for (const auto& [key, value] : kv) {
    const auto dot = key.find('.');
    const auto sec = key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + ("[" + sec + "]\n");
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + value + "\n";
  }
  return out;
}

}  // namespace pargan::cli
