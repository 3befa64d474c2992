#include <scrl/error.hpp>

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "scrl_cli/cli.hpp"

namespace scrl::cli {

using nlohmann::json;

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%6.2f", 100.0 * v);
  return buf;
}

double rank_or_last(const EvalResult& r, int k) {
  if (r.cmc.empty()) return 0.0;
  return r.cmc[std::min<std::size_t>(static_cast<std::size_t>(k - 1), r.cmc.size() - 1)];
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw Error("cli", "cannot write " + path.string());
  os << text;
  if (!os) throw Error("cli", "write failed for " + path.string());
}

}  // namespace

std::string format_results_table(const std::vector<EvalResult>& results) {
  if (results.empty()) throw Error("cli", "no results to report");
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-10s %-22s %-15s %7s %7s %7s %7s %7s\n", "setting", "protocol", "composition",
                "R1", "R10", "R20", "mAP", "mINP");
  os << line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof(line), "%-10s %-22s %-15s %7s %7s %7s %7s %7s\n", r.setting.c_str(),
                  r.protocol.c_str(), r.composition.c_str(), pct(rank_or_last(r, 1)).c_str(),
                  pct(rank_or_last(r, 10)).c_str(), pct(rank_or_last(r, 20)).c_str(), pct(r.map).c_str(),
                  pct(r.minp).c_str());
    os << line;
  }
  return os.str();
}

std::string format_ablation_table(const AblationTable& table) {
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof(line), "%-10s %4s  %-15s  %-15s  %-15s\n", "setting", "runs", "R1 (mean+-sd)",
                "mAP (mean+-sd)", "mINP (mean+-sd)");
  os << line;
  for (const auto& s : table.summary) {
    auto cell = [](double m, double sd) { return pct(m) + " +-" + pct(sd); };
    std::snprintf(line, sizeof(line), "%-10s %4d  %-15s  %-15s  %-15s\n", std::string(to_string(s.setting)).c_str(),
                  s.runs, cell(s.rank1_mean, s.rank1_sd).c_str(), cell(s.map_mean, s.map_sd).c_str(),
                  cell(s.minp_mean, s.minp_sd).c_str());
    os << line;
  }
  return os.str();
}

std::string results_dump(const std::vector<EvalResult>& results, const std::string& config_header) {
  json j;
  j["config"] = config_header;
  j["results"] = json::array();
  for (const auto& r : results) j["results"].push_back(json::parse(r.to_json()));
  return j.dump(2) + "\n";
}

std::vector<EvalResult> parse_results_dump(const std::string& text) {
  std::vector<EvalResult> out;
  try {
    const auto j = json::parse(text);
    for (const auto& r : j.at("results")) out.push_back(EvalResult::from_json(r.dump()));
  } catch (const json::exception& e) {
    throw Error("cli", std::string("malformed results dump: ") + e.what());
  }
  return out;
}

std::string ablation_dump(const AblationTable& table, const std::string& config_header) {
  json j;
  j["config"] = config_header;
  j["rows"] = json::array();
  for (const auto& row : table.rows) {
    json r;
    r["setting"] = std::string(to_string(row.setting));
    r["seed"] = row.seed;
    r["batch_sequence_hash"] = row.batch_sequence_hash;
    r["result"] = json::parse(row.result.to_json());
    j["rows"].push_back(r);
  }
  j["summary"] = json::array();
  for (const auto& s : table.summary) {
    j["summary"].push_back({{"setting", std::string(to_string(s.setting))},
                            {"runs", s.runs},
                            {"rank1_mean", s.rank1_mean},
                            {"rank1_sd", s.rank1_sd},
                            {"map_mean", s.map_mean},
                            {"map_sd", s.map_sd},
                            {"minp_mean", s.minp_mean},
                            {"minp_sd", s.minp_sd}});
  }
  return j.dump(2) + "\n";
}

std::string cmc_svg(const std::vector<EvalResult>& results) {
  constexpr int W = 640, H = 420, L = 60, R = 160, T = 20, B = 50;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
  std::size_t max_rank = 1;
  for (const auto& r : results) max_rank = std::max(max_rank, r.cmc.size());
  auto x = [&](double rank) { return L + (W - L - R) * (rank - 1) / std::max<double>(1, max_rank - 1); };
  auto y = [&](double v) { return T + (H - T - B) * (1.0 - v); };

  std::ostringstream os;
  os.precision(4);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int t = 0; t <= 10; t += 2) {
    const double v = t / 10.0;
    os << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << y(v) << "\" y2=\"" << y(v)
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << L - 8 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\">" << t * 10 << "</text>\n";
  }
  for (std::size_t k = 1; k <= max_rank; k += std::max<std::size_t>(1, max_rank / 10)) {
    os << "<text x=\"" << x(static_cast<double>(k)) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << k
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">rank</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
     << ")\" text-anchor=\"middle\">matching rate (%)</text>\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const char* c = colors[i % std::size(colors)];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < r.cmc.size(); ++k) os << x(static_cast<double>(k + 1)) << ',' << y(r.cmc[k]) << ' ';
    os << "\"/>\n";
    const double ly = T + 16 + 18.0 * static_cast<double>(i);
    os << "<line x1=\"" << W - R + 10 << "\" x2=\"" << W - R + 30 << "\" y1=\"" << ly - 4 << "\" y2=\"" << ly - 4
       << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 36 << "\" y=\"" << ly << "\">" << r.setting << " " << r.protocol << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

ReportPaths emit_report(const std::vector<EvalResult>& results, const AblationTable* ablation,
                        const std::filesystem::path& dir, bool plots, const std::string& config_header,
                        std::ostream& out) {
  if (results.empty()) throw Error("cli", "no results to report");
  std::filesystem::create_directories(dir);
  ReportPaths paths{dir / "results.txt", dir / "results.json", std::nullopt};
  std::string table = format_results_table(results);
  if (ablation != nullptr) table += "\n" + format_ablation_table(*ablation);
  write_file(paths.table, table);
  write_file(paths.dump, results_dump(results, config_header));
  if (ablation != nullptr) write_file(dir / "ablation.json", ablation_dump(*ablation, config_header));
  if (plots) {
    paths.plot = dir / "cmc.svg";
    write_file(*paths.plot, cmc_svg(results));
  }
  out << table;
  return paths;
}

}  // namespace scrl::cli
