#include "acflow/architecture.hpp"

#include <charconv>
#include <sstream>

#include "acflow/error.hpp"

namespace acflow {

std::string_view kind_name(LayerSpec::Kind kind) {
  switch (kind) {
    case LayerSpec::Kind::affine_coupling: return "affine_coupling";
    case LayerSpec::Kind::linear: return "linear";
    case LayerSpec::Kind::rnn_coupling: return "rnn_coupling";
    case LayerSpec::Kind::leaky_relu: return "leaky_relu";
    case LayerSpec::Kind::reverse: return "reverse";
  }
  return "?";
}

std::string_view kind_name(BaseSpec::Kind kind) {
  return kind == BaseSpec::Kind::gaussian ? "gaussian" : "autoregressive_gmm";
}

namespace {

struct LineParser {
  std::size_t line_no;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError("architecture line " + std::to_string(line_no) + ": " + msg);
  }

  std::size_t size_value(std::string_view key, std::string_view v) const {
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
      fail("'" + std::string(key) + "' needs a non-negative integer, got '" + std::string(v) + "'");
    }
    return out;
  }

  double real_value(std::string_view key, std::string_view v) const {
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
      fail("'" + std::string(key) + "' needs a number, got '" + std::string(v) + "'");
    }
    return out;
  }
};

std::vector<std::string> split_words(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

template <class Apply>
void for_each_option(const LineParser& p, const std::vector<std::string>& words, std::size_t first,
                     Apply apply) {
  for (std::size_t i = first; i < words.size(); ++i) {
    const auto eq = words[i].find('=');
    if (eq == std::string::npos || eq == 0) p.fail("expected key=value, got '" + words[i] + "'");
    const std::string key = words[i].substr(0, eq);
    const std::string value = words[i].substr(eq + 1);
    if (!apply(std::string_view(key), std::string_view(value))) {
      p.fail("unknown option '" + key + "' for '" + words[1] + "'");
    }
  }
}

std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

Architecture Architecture::parse(std::string_view text) {
  Architecture arch;
  bool have_dim = false;
  bool have_base = false;
  std::istringstream in{std::string(text)};
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto words = split_words(line);
    if (words.empty()) continue;
    const LineParser p{line_no};
    if (words[0] == "dim") {
      if (words.size() != 2) p.fail("expected 'dim <n>'");
      arch.dim = p.size_value("dim", words[1]);
      if (arch.dim == 0) p.fail("dim must be positive");
      have_dim = true;
    } else if (words[0] == "layer") {
      if (words.size() < 2) p.fail("layer kind missing");
      LayerSpec s;
      const std::string& kind = words[1];
      if (kind == "linear") {
        s.kind = LayerSpec::Kind::linear;
        for_each_option(p, words, 2, [&](std::string_view k, std::string_view v) {
          if (k == "hidden") s.hidden = p.size_value(k, v);
          else if (k == "depth") s.depth = p.size_value(k, v);
          else if (k == "rank") s.rank = p.size_value(k, v);
          else return false;
          return true;
        });
      } else if (kind == "affine_coupling") {
        s.kind = LayerSpec::Kind::affine_coupling;
        for_each_option(p, words, 2, [&](std::string_view k, std::string_view v) {
          if (k == "hidden") s.hidden = p.size_value(k, v);
          else if (k == "depth") s.depth = p.size_value(k, v);
          else if (k == "parity") s.parity = p.size_value(k, v);
          else if (k == "clamp") s.clamp = p.real_value(k, v);
          else return false;
          return true;
        });
      } else if (kind == "rnn_coupling") {
        s.kind = LayerSpec::Kind::rnn_coupling;
        for_each_option(p, words, 2, [&](std::string_view k, std::string_view v) {
          if (k == "hidden") s.hidden = p.size_value(k, v);
          else if (k == "layers") s.layers = p.size_value(k, v);
          else if (k == "clamp") s.clamp = p.real_value(k, v);
          else return false;
          return true;
        });
      } else if (kind == "leaky_relu") {
        s.kind = LayerSpec::Kind::leaky_relu;
        for_each_option(p, words, 2, [&](std::string_view k, std::string_view v) {
          if (k != "alpha") return false;
          s.alpha = p.real_value(k, v);
          return true;
        });
        if (!(s.alpha > 0.0)) p.fail("leaky_relu alpha must be positive");
      } else if (kind == "reverse") {
        s.kind = LayerSpec::Kind::reverse;
        for_each_option(p, words, 2, [](std::string_view, std::string_view) { return false; });
      } else {
        p.fail("unknown layer kind '" + kind + "'");
      }
      if (!(s.clamp > 0.0)) p.fail("clamp must be positive");
      if ((s.kind == LayerSpec::Kind::rnn_coupling && (s.layers == 0 || s.hidden == 0)) ||
          (s.kind == LayerSpec::Kind::affine_coupling && (s.depth == 0 || s.hidden == 0))) {
        p.fail("layer sizes must be positive");
      }
      arch.layers.push_back(s);
    } else if (words[0] == "base") {
      if (words.size() < 2) p.fail("base kind missing");
      BaseSpec b;
      if (words[1] == "autoregressive_gmm") {
        b.kind = BaseSpec::Kind::autoregressive_gmm;
        for_each_option(p, words, 2, [&](std::string_view k, std::string_view v) {
          if (k == "hidden") b.hidden = p.size_value(k, v);
          else if (k == "layers") b.layers = p.size_value(k, v);
          else if (k == "components") b.components = p.size_value(k, v);
          else return false;
          return true;
        });
        if (b.components == 0 || b.layers == 0 || b.hidden == 0) p.fail("base sizes must be positive");
      } else if (words[1] == "gaussian") {
        b.kind = BaseSpec::Kind::gaussian;
        for_each_option(p, words, 2, [&](std::string_view k, std::string_view v) {
          if (k == "hidden") b.hidden = p.size_value(k, v);
          else if (k == "depth") b.depth = p.size_value(k, v);
          else return false;
          return true;
        });
      } else {
        p.fail("unknown base kind '" + words[1] + "'");
      }
      arch.base = b;
      have_base = true;
    } else {
      p.fail("unknown directive '" + words[0] + "'");
    }
  }
  if (!have_dim) throw ParseError("architecture: missing 'dim' line");
  if (!have_base) throw ParseError("architecture: missing 'base' line");
  return arch;
}

std::string Architecture::to_string() const {
  std::ostringstream out;
  out << "dim " << dim << '\n';
  for (const auto& s : layers) {
    out << "layer " << kind_name(s.kind);
    switch (s.kind) {
      case LayerSpec::Kind::linear:
        out << " hidden=" << s.hidden << " depth=" << s.depth << " rank=" << s.rank;
        break;
      case LayerSpec::Kind::affine_coupling:
        out << " hidden=" << s.hidden << " depth=" << s.depth << " parity=" << s.parity
            << " clamp=" << format_real(s.clamp);
        break;
      case LayerSpec::Kind::rnn_coupling:
        out << " hidden=" << s.hidden << " layers=" << s.layers << " clamp=" << format_real(s.clamp);
        break;
      case LayerSpec::Kind::leaky_relu:
        out << " alpha=" << format_real(s.alpha);
        break;
      case LayerSpec::Kind::reverse:
        break;
    }
    out << '\n';
  }
  out << "base " << kind_name(base.kind) << " hidden=" << base.hidden;
  if (base.kind == BaseSpec::Kind::gaussian) {
    out << " depth=" << base.depth;
  } else {
    out << " layers=" << base.layers << " components=" << base.components;
  }
  out << '\n';
  return out.str();
}

Architecture Architecture::layered(std::size_t dim, std::size_t blocks, std::size_t hidden,
                                   std::size_t base_layers, std::size_t components,
                                   double alpha) {
  Architecture arch;
  arch.dim = dim;
  for (std::size_t i = 0; i < blocks; ++i) {
    if (i > 0) arch.layers.push_back({.kind = LayerSpec::Kind::reverse});
    arch.layers.push_back({.kind = LayerSpec::Kind::linear, .hidden = hidden, .depth = 2});
    arch.layers.push_back({.kind = LayerSpec::Kind::leaky_relu, .alpha = alpha});
    arch.layers.push_back({.kind = LayerSpec::Kind::rnn_coupling, .hidden = hidden, .layers = 2});
  }
  arch.base = {.kind = BaseSpec::Kind::autoregressive_gmm,
               .hidden = hidden,
               .layers = base_layers,
               .components = components};
  return arch;
}

Architecture Architecture::preset(std::string_view name, std::size_t dim) {
  if (name == "synthetic") return synthetic(dim);
  if (name == "tabular") return tabular(dim);
  throw ParseError("unknown architecture preset '" + std::string(name) + "'");
}

void Architecture::set_hidden(std::size_t hidden) {
  for (auto& s : layers) s.hidden = hidden;
  base.hidden = hidden;
}

}  // namespace acflow
