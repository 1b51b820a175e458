#pragma once

// Versioned JSON and CSV encodings of DivergenceReport.
//
// CSV header (fixed):  probe_id,fdt,sdt,dppl,ppl
// Reals are written with 17 significant digits so files round-trip exactly.

#include <string>
#include <string_view>

#include "dtm/metrics.hpp"
#include "json.hpp"

namespace dtm {

inline constexpr std::string_view kReportSchema = "dtm.divergence_report";
inline constexpr int kReportSchemaVersion = 1;
inline constexpr std::string_view kReportCsvHeader = "probe_id,fdt,sdt,dppl,ppl";

nlohmann::json report_to_json(const DivergenceReport& report);
DivergenceReport report_from_json(const nlohmann::json& j);  // validates

std::string report_to_csv(const DivergenceReport& report);
DivergenceReport report_from_csv(std::string_view csv, const ProbeSpec& spec, std::string ppl_source);

// Throws FormatError when `j` does not match the report schema.
void check_report_schema(const nlohmann::json& j);

std::string format_real(double v);

}  // namespace dtm
