#pragma once

// CSV outputs. Every file has a header row and a fixed column order; reals
// are printed with 17 significant digits and missing values are empty.
//
//   metrics.csv               epoch,iter,alpha_mode,lr,l_total,l_inter,l_intra,l_ce,l_ent,l_div,
//                             pseudo_label_agreement,accuracy,beta_mean_<domain>...
//   epochs.csv                epoch,alpha_mode,pseudo_label_agreement,pseudo_label_accuracy,
//                             accuracy,beta_mean_<domain>...
//   beta.csv                  sample,label,pred,beta_<domain>...        (label -1 when unknown)
//   alpha.csv                 sample,feature_domain,alpha_<domain>...
//   beta_domain_mean.csv      domain,mean_beta
//   beta_class_deviation.csv  class,count,<domain>...   class mean beta minus domain mean beta
//   alpha_domain_mean.csv     feature_domain,<domain>...

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "biaten/databank.hpp"
#include "biaten/trainer.hpp"

namespace biaten {

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) {
  return v ? format_real(*v) : std::string();
}

inline std::vector<std::string> domain_names(const FeatureBank& bank) {
  std::vector<std::string> names;
  for (const auto& d : bank.domains) names.push_back(d.name);
  return names;
}

namespace detail {

inline void header(std::ostringstream& out, std::initializer_list<const char*> fixed,
                   const std::vector<std::string>& names, const std::string& prefix) {
  bool first = true;
  for (const char* f : fixed) {
    out << (first ? "" : ",") << f;
    first = false;
  }
  for (const auto& n : names) out << (first ? "" : ",") << prefix << n, first = false;
  out << '\n';
}

inline void reals(std::ostringstream& out, std::span<const double> values) {
  for (double v : values) out << ',' << format_real(v);
}

}  // namespace detail

inline std::string metrics_csv(const std::vector<MetricsRow>& rows, const std::vector<std::string>& names) {
  std::ostringstream out;
  detail::header(out,
                 {"epoch", "iter", "alpha_mode", "lr", "l_total", "l_inter", "l_intra", "l_ce", "l_ent",
                  "l_div", "pseudo_label_agreement", "accuracy"},
                 names, "beta_mean_");
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.iter << ',' << to_string(r.alpha_mode) << ',' << format_real(r.lr) << ','
        << format_real(r.loss.l_total) << ',' << format_real(r.loss.l_inter) << ','
        << format_real(r.loss.l_intra) << ',' << format_real(r.loss.l_ce) << ','
        << format_real(r.loss.l_ent) << ',' << format_real(r.loss.l_div) << ','
        << format_optional(r.pseudo_label_agreement) << ',' << format_optional(r.accuracy);
    detail::reals(out, r.mean_beta);
    out << '\n';
  }
  return out.str();
}

inline std::string epochs_csv(const std::vector<EpochSummary>& rows, const std::vector<std::string>& names) {
  std::ostringstream out;
  detail::header(out, {"epoch", "alpha_mode", "pseudo_label_agreement", "pseudo_label_accuracy", "accuracy"},
                 names, "beta_mean_");
  for (const auto& r : rows) {
    out << r.epoch << ',' << to_string(r.alpha_mode) << ',' << format_optional(r.pseudo_label_agreement)
        << ',' << format_optional(r.pseudo_label_accuracy) << ',' << format_optional(r.accuracy);
    if (r.mean_beta.empty())
      for (std::size_t i = 0; i < names.size(); ++i) out << ',';
    else
      detail::reals(out, r.mean_beta);
    out << '\n';
  }
  return out.str();
}

inline std::string beta_dump_csv(const EvalReport& r, const std::optional<Labels>& labels,
                                 const std::vector<std::string>& names) {
  std::ostringstream out;
  detail::header(out, {"sample", "label", "pred"}, names, "beta_");
  for (std::size_t m = 0; m < r.beta.rows(); ++m) {
    out << m << ',' << (labels ? std::to_string((*labels)[m]) : std::string("-1")) << ','
        << r.predicted[m];
    detail::reals(out, r.beta.row(m));
    out << '\n';
  }
  return out.str();
}

inline std::string alpha_dump_csv(const EvalReport& r, const std::vector<std::string>& names) {
  std::ostringstream out;
  detail::header(out, {"sample", "feature_domain"}, names, "alpha_");
  for (std::size_t m = 0; m < r.beta.rows(); ++m)
    for (std::size_t i = 0; i < r.alpha.size(); ++i) {
      out << m << ',' << names[i];
      detail::reals(out, r.alpha[i].row(m));
      out << '\n';
    }
  return out.str();
}

inline std::string beta_domain_mean_csv(const EvalReport& r, const std::vector<std::string>& names) {
  std::ostringstream out;
  out << "domain,mean_beta\n";
  for (std::size_t i = 0; i < names.size(); ++i) out << names[i] << ',' << format_real(r.mean_beta[i]) << '\n';
  return out.str();
}

inline std::string beta_class_deviation_csv(const EvalReport& r, const std::vector<std::string>& names) {
  std::ostringstream out;
  detail::header(out, {"class", "count"}, names, "");
  for (std::size_t c = 0; c < r.class_counts.size(); ++c) {
    out << c << ',' << r.class_counts[c];
    detail::reals(out, r.class_beta_deviation.row(c));
    out << '\n';
  }
  return out.str();
}

inline std::string alpha_domain_mean_csv(const EvalReport& r, const std::vector<std::string>& names) {
  std::ostringstream out;
  detail::header(out, {"feature_domain"}, names, "");
  for (std::size_t i = 0; i < r.mean_alpha.rows(); ++i) {
    out << names[i];
    detail::reals(out, r.mean_alpha.row(i));
    out << '\n';
  }
  return out.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text);
}

// Per-sample dumps plus the three analysis tables.
inline void write_weight_reports(const std::filesystem::path& dir, const EvalReport& r,
                                 const std::optional<Labels>& labels, const std::vector<std::string>& names) {
  write_text(dir / "beta.csv", beta_dump_csv(r, labels, names));
  write_text(dir / "alpha.csv", alpha_dump_csv(r, names));
  write_text(dir / "beta_domain_mean.csv", beta_domain_mean_csv(r, names));
  write_text(dir / "beta_class_deviation.csv", beta_class_deviation_csv(r, names));
  write_text(dir / "alpha_domain_mean.csv", alpha_domain_mean_csv(r, names));
}

// ---------------------------------------------------------------------------
// Reading dumps back

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_real(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": cannot parse number '" + s + "'");
  }
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                                      std::vector<std::string>& header) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  header = split_csv_line(line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw FormatError(path.string() + ": row has " + std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(header.size()));
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace detail

struct WeightDump {
  std::vector<std::string> domains;
  EvalReport report;
  std::size_t classes = 0;
};

// Rebuilds the analysis tables from beta.csv / alpha.csv in `dir`. Classes
// are grouped by ground truth where present, otherwise by prediction.
inline WeightDump read_weight_dump(const std::filesystem::path& dir) {
  WeightDump dump;
  std::vector<std::string> header;
  const auto beta_rows = detail::read_csv(dir / "beta.csv", header);
  if (header.size() < 4 || header[0] != "sample" || header[1] != "label" || header[2] != "pred")
    throw FormatError("beta.csv: unexpected header");
  for (std::size_t k = 3; k < header.size(); ++k) {
    if (header[k].rfind("beta_", 0) != 0) throw FormatError("beta.csv: unexpected column " + header[k]);
    dump.domains.push_back(header[k].substr(5));
  }
  const std::size_t n = dump.domains.size();
  const std::size_t samples = beta_rows.size();
  if (samples == 0) throw FormatError("beta.csv: no samples");
  EvalReport& r = dump.report;
  r.beta = Matrix(samples, n);
  r.groups.resize(samples);
  r.predicted.resize(samples);
  for (std::size_t m = 0; m < samples; ++m) {
    const auto& cells = beta_rows[m];
    const long label = std::stol(cells[1]);
    r.predicted[m] = static_cast<std::uint32_t>(std::stoul(cells[2]));
    r.groups[m] = label >= 0 ? static_cast<std::uint32_t>(label) : r.predicted[m];
    dump.classes = std::max<std::size_t>(dump.classes, r.groups[m] + 1);
    for (std::size_t i = 0; i < n; ++i) r.beta(m, i) = detail::parse_real(cells[3 + i], "beta.csv");
  }
  r.alpha.assign(n, Matrix(samples, n));
  if (std::filesystem::exists(dir / "alpha.csv")) {
    const auto alpha_rows = detail::read_csv(dir / "alpha.csv", header);
    if (header.size() != 2 + n || alpha_rows.size() != samples * n)
      throw FormatError("alpha.csv: inconsistent with beta.csv");
    for (std::size_t row = 0; row < alpha_rows.size(); ++row) {
      const std::size_t m = row / n;
      const std::size_t i = row % n;
      for (std::size_t j = 0; j < n; ++j)
        r.alpha[i](m, j) = detail::parse_real(alpha_rows[row][2 + j], "alpha.csv");
    }
  }
  summarize_weights(r, dump.classes);
  return dump;
}

}  // namespace biaten
