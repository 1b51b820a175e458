#include "dtm/report.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

namespace dtm {

using nlohmann::json;

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json report_to_json(const DivergenceReport& report) {
  report.validate();
  const auto& a = report.aggregates;
  json records = json::array();
  for (const auto& r : report.records) {
    records.push_back({{"probe_id", r.probe_id}, {"fdt", r.fdt}, {"sdt", r.sdt}, {"dppl", r.dppl}, {"ppl", r.ppl}});
  }
  json j = {
      {"schema", kReportSchema},
      {"schema_version", kReportSchemaVersion},
      {"conventions",
       {{"fdt", "matching completion tokens before the first divergence; completion_len when none"},
        {"sdt", "divergent positions within the completion region"},
        {"dppl", "compressed-model perplexity on the base greedy completion, teacher-forced, after the prefix"},
        {"ppl", "compressed-model perplexity over the whole ppl_source sequence"},
        {"ppl_source", report.ppl_source},
        {"quantile", "lower: sorted[floor(q * (n - 1))]"},
        {"argmax_ties", "lowest index"}}},
      {"spec", {{"prefix_len", report.spec.prefix_len}, {"total_len", report.spec.total_len}}},
      {"aggregates",
       {{"probes", a.probes},
        {"mean_fdt", a.mean_fdt},
        {"median_fdt", a.median_fdt},
        {"fdt_75", a.fdt_75},
        {"mean_sdt", a.mean_sdt},
        {"mean_dppl", a.mean_dppl},
        {"mean_ppl", a.mean_ppl},
        {"full_matches", a.full_matches}}},
      {"records", std::move(records)},
  };
  check_report_schema(j);
  return j;
}

void check_report_schema(const json& j) {
  auto fail = [](const std::string& what) { throw FormatError("report schema: " + what); };
  if (!j.is_object()) fail("not an object");
  if (j.value("schema", "") != kReportSchema) fail("wrong schema tag");
  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer() ||
      j["schema_version"].get<int>() != kReportSchemaVersion) {
    fail("unsupported schema_version");
  }
  for (const char* key : {"conventions", "spec", "aggregates"}) {
    if (!j.contains(key) || !j[key].is_object()) fail(std::string("missing object '") + key + "'");
  }
  if (!j["conventions"].contains("ppl_source") || !j["conventions"]["ppl_source"].is_string()) {
    fail("missing conventions.ppl_source");
  }
  for (const char* key : {"prefix_len", "total_len"}) {
    if (!j["spec"].contains(key) || !j["spec"][key].is_number_unsigned()) fail(std::string("spec.") + key);
  }
  for (const char* key : {"mean_fdt", "median_fdt", "fdt_75", "mean_sdt", "mean_dppl", "mean_ppl"}) {
    if (!j["aggregates"].contains(key) || !j["aggregates"][key].is_number()) fail(std::string("aggregates.") + key);
  }
  for (const char* key : {"probes", "full_matches"}) {
    if (!j["aggregates"].contains(key) || !j["aggregates"][key].is_number_unsigned()) {
      fail(std::string("aggregates.") + key);
    }
  }
  if (!j.contains("records") || !j["records"].is_array()) fail("missing records array");
  for (const auto& r : j["records"]) {
    for (const char* key : {"probe_id", "fdt", "sdt"}) {
      if (!r.contains(key) || !r[key].is_number_unsigned()) fail(std::string("record.") + key);
    }
    for (const char* key : {"dppl", "ppl"}) {
      if (!r.contains(key) || !r[key].is_number()) fail(std::string("record.") + key);
    }
  }
}

DivergenceReport report_from_json(const json& j) {
  check_report_schema(j);
  DivergenceReport rep;
  rep.spec.prefix_len = j["spec"]["prefix_len"].get<std::size_t>();
  rep.spec.total_len = j["spec"]["total_len"].get<std::size_t>();
  rep.ppl_source = j["conventions"]["ppl_source"].get<std::string>();
  for (const auto& r : j["records"]) {
    rep.records.push_back({r["probe_id"].get<std::size_t>(), r["fdt"].get<std::size_t>(), r["sdt"].get<std::size_t>(),
                           r["dppl"].get<double>(), r["ppl"].get<double>()});
  }
  const auto& a = j["aggregates"];
  rep.aggregates = {a["probes"].get<std::size_t>(), a["mean_fdt"].get<double>(),  a["median_fdt"].get<double>(),
                    a["fdt_75"].get<double>(),      a["mean_sdt"].get<double>(),  a["mean_dppl"].get<double>(),
                    a["mean_ppl"].get<double>(),    a["full_matches"].get<std::size_t>()};
  rep.validate();
  return rep;
}

std::string report_to_csv(const DivergenceReport& report) {
  report.validate();
  std::string out(kReportCsvHeader);
  out += '\n';
  for (const auto& r : report.records) {
    out += std::to_string(r.probe_id) + ',' + std::to_string(r.fdt) + ',' + std::to_string(r.sdt) + ',' +
           format_real(r.dppl) + ',' + format_real(r.ppl) + '\n';
  }
  return out;
}

namespace {

template <typename T>
T parse_field(std::string_view s, std::size_t line) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("csv line " + std::to_string(line) + ": bad field '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

DivergenceReport report_from_csv(std::string_view csv, const ProbeSpec& spec, std::string ppl_source) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || line != kReportCsvHeader) throw FormatError("csv header mismatch");
  std::vector<ProbeRecord> records;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1)) {
      f.push_back(rest.substr(0, pos));
    }
    f.push_back(rest);
    if (f.size() != 5) throw FormatError("csv line " + std::to_string(lineno) + ": expected 5 fields");
    records.push_back({parse_field<std::size_t>(f[0], lineno), parse_field<std::size_t>(f[1], lineno),
                       parse_field<std::size_t>(f[2], lineno), parse_field<double>(f[3], lineno),
                       parse_field<double>(f[4], lineno)});
  }
  if (records.empty()) throw FormatError("csv has no records");
  auto rep = DivergenceReport::from_records(spec, std::move(records), std::move(ppl_source));
  rep.validate();
  return rep;
}

}  // namespace dtm
