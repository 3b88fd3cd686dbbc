#pragma once

#include <json.hpp>

#include "elt/analysis.hpp"

namespace elt {

// CSV / JSON emitters for the experiment artifacts. All number formatting is
// fixed so identical results serialize to identical bytes.
std::string format_double(double v);

std::string sweep_csv(const SweepResult& res);
nlohmann::json sweep_json(const SweepResult& res);

std::string prune_csv(const PruneResult& res);
nlohmann::json prune_json(const PruneResult& res);

nlohmann::json similarity_json(const RouterSimilarity& sim);
nlohmann::json utilization_json(const std::vector<ModuleUtilization>& stats);
nlohmann::json decisions_json(const std::vector<RoutingDecision>& ds);

void write_text_file(const std::string& path, const std::string& text);

// Consolidated run report: merges whatever artifacts exist in the run
// directory; absent artifacts are listed under "missing". The result always
// validates against the bundled report schema.
nlohmann::json emit_report(const std::string& run_dir);

// The schema shipped at schemas/report.schema.json.
const std::string& report_schema_text();

// Minimal JSON-schema subset checker (type/properties/required/items).
// Returns an error description, or empty when the document validates.
std::string validate_against_schema(const nlohmann::json& doc, const nlohmann::json& schema);

}  // namespace elt
