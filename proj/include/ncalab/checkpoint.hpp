#pragma once

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include "ncalab/error.hpp"
#include "ncalab/policy.hpp"

namespace ncalab {

// Policy checkpoint, plain text:
//
//   ncalab-policy 1
//   family tabular            | family autoregressive
//   instructions N            | instructions N
//   responses M               | vocab V
//                             | max_length T
//   logits <count>
//   <one %.17g value per line>
//
// %.17g round-trips every double exactly.

inline constexpr const char* kCheckpointMagic = "ncalab-policy";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_logits(std::ostream& os, std::span<const double> logits) {
  os << "logits " << logits.size() << '\n';
  char buf[32];
  for (double v : logits) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf << '\n';
  }
}

inline std::size_t expect_field(std::istream& in, const std::string& key) {
  std::string k;
  long long v = -1;
  if (!(in >> k >> v) || k != key || v < 0)
    throw ParseError("checkpoint: expected '" + key + " <n>'");
  return static_cast<std::size_t>(v);
}

inline std::vector<double> read_logits(std::istream& in) {
  const std::size_t n = expect_field(in, "logits");
  std::vector<double> out;
  out.reserve(n);
  std::string tok;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(in >> tok)) throw ParseError("checkpoint: truncated logit array");
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw ParseError("checkpoint: bad logit '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const TabularPolicy& p) {
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n'
     << "family tabular\n"
     << "instructions " << p.num_instructions() << '\n'
     << "responses " << p.num_responses() << '\n';
  detail::write_logits(os, p.logits());
}

inline void write_checkpoint(std::ostream& os, const AutoregressivePolicy& p) {
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n'
     << "family autoregressive\n"
     << "instructions " << p.num_instructions() << '\n'
     << "vocab " << p.vocab() << '\n'
     << "max_length " << p.max_length() << '\n';
  detail::write_logits(os, p.logits());
}

inline void write_checkpoint(std::ostream& os, const AnyPolicy& p) {
  std::visit([&](const auto& q) { write_checkpoint(os, q); }, p);
}

inline AnyPolicy read_checkpoint(std::istream& in) {
  std::string magic, key, family;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic)
    throw ParseError("not a policy checkpoint");
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  if (!(in >> key >> family) || key != "family") throw ParseError("checkpoint: missing family");
  const std::size_t n = detail::expect_field(in, "instructions");
  if (family == "tabular") {
    const std::size_t m = detail::expect_field(in, "responses");
    return TabularPolicy(n, m, detail::read_logits(in));
  }
  if (family == "autoregressive") {
    const std::size_t v = detail::expect_field(in, "vocab");
    const std::size_t t = detail::expect_field(in, "max_length");
    auto logits = detail::read_logits(in);
    if (logits.empty()) throw ParseError("checkpoint: empty logit array");
    return AutoregressivePolicy(n, v, t, std::move(logits));
  }
  throw ParseError("checkpoint: unknown family '" + family + "'");
}

inline void save_checkpoint(const std::string& path, const AnyPolicy& p) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  write_checkpoint(out, p);
}

inline AnyPolicy load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace ncalab
