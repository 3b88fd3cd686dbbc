#include "elt/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "elt/trainer.hpp"

namespace elt {

using nlohmann::json;
namespace fs = std::filesystem;

std::string format_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw FormatError("short write on '" + path + "'");
}

void write_train_log_jsonl(const std::string& path, const TrainLog& log) {
    std::ostringstream out;
    for (const auto& s : log.steps) {
        json j;
        j["step"] = s.step;
        j["lr"] = s.lr;
        j["total_loss"] = s.total;
        j["distill_loss"] = s.distill;
        j["load_loss"] = s.load;
        j["bce_loss"] = s.bce;
        json rates = json::object();
        for (const auto& [k, v] : s.rates) rates[k] = v;
        j["selection_rates"] = rates;
        out << j.dump() << "\n";
    }
    write_text_file(path, out.str());
}

std::string sweep_csv(const SweepResult& res) {
    std::ostringstream out;
    out << "kind,capacity,eval_distill_loss,eval_task_metric,active_params,"
           "active_token_frac,router_params,seed\n";
    for (const auto& r : res.rows) {
        out << r.kind << ',' << format_double(r.capacity) << ','
            << format_double(r.eval_distill_loss) << ',' << format_double(r.eval_task_metric)
            << ',' << format_double(r.active_params) << ','
            << format_double(r.active_token_frac) << ',' << r.router_params << ',' << r.seed
            << "\n";
    }
    return out.str();
}

json sweep_json(const SweepResult& res) {
    json rows = json::array();
    for (const auto& r : res.rows) {
        json j;
        j["kind"] = r.kind;
        j["capacity"] = r.capacity;
        j["eval_distill_loss"] = r.eval_distill_loss;
        j["eval_task_metric"] = r.eval_task_metric;
        j["active_params"] = r.active_params;
        j["active_token_frac"] = r.active_token_frac;
        j["router_params"] = r.router_params;
        j["seed"] = r.seed;
        rows.push_back(j);
    }
    json out;
    out["rows"] = rows;
    return out;
}

std::string prune_csv(const PruneResult& res) {
    std::ostringstream out;
    out << "kind,corpus,count,mean_dloss,sd_dloss,mean_top1_match,sd_top1_match\n";
    for (const auto& r : res.rows) {
        out << prune_kind_name(res.kind) << ',' << res.corpus_name << ',' << r.count << ','
            << format_double(r.mean_dloss) << ',' << format_double(r.sd_dloss) << ','
            << format_double(r.mean_match) << ',' << format_double(r.sd_match) << "\n";
    }
    return out.str();
}

json prune_json(const PruneResult& res) {
    json rows = json::array();
    for (const auto& r : res.rows) {
        json j;
        j["count"] = r.count;
        j["mean_dloss"] = r.mean_dloss;
        j["sd_dloss"] = r.sd_dloss;
        j["mean_top1_match"] = r.mean_match;
        j["sd_top1_match"] = r.sd_match;
        rows.push_back(j);
    }
    json out;
    out["kind"] = prune_kind_name(res.kind);
    out["corpus"] = res.corpus_name;
    out["base_loss"] = res.base_loss;
    out["rows"] = rows;
    return out;
}

json similarity_json(const RouterSimilarity& sim) {
    json out;
    out["labels"] = sim.labels;
    out["matrix"] = sim.matrix;
    out["mask_layer"] = sim.mask_layer;
    out["masks"] = sim.masks;
    return out;
}

json utilization_json(const std::vector<ModuleUtilization>& stats) {
    json arr = json::array();
    for (const auto& u : stats) {
        json j;
        j["layer"] = u.layer;
        j["kind"] = route_kind_name(u.kind);
        j["options"] = u.options;
        j["k"] = u.k;
        j["sample_rows"] = u.sample_rows;
        j["freq"] = u.freq;
        j["mean_prob"] = u.mean_prob;
        j["selection_rate"] = u.selection_rate;
        arr.push_back(j);
    }
    return arr;
}

json decisions_json(const std::vector<RoutingDecision>& ds) {
    json arr = json::array();
    for (const auto& d : ds) {
        json j;
        j["layer"] = d.layer;
        j["kind"] = route_kind_name(d.kind);
        j["step"] = d.step;
        j["selected"] = d.selected;
        j["weights"] = d.weights;
        arr.push_back(j);
    }
    return arr;
}

// ---------------------------------------------------------------------------
// consolidated report
// ---------------------------------------------------------------------------

namespace {

const char* const kReportSchema = R"({
  "type": "object",
  "required": ["version", "config", "sections", "missing"],
  "properties": {
    "version": {"type": "integer"},
    "config": {"type": ["object", "null"]},
    "sections": {
      "type": "object",
      "required": ["train_log", "sweep", "prune", "router_similarity", "eval"],
      "properties": {
        "train_log": {"type": ["array", "null"]},
        "sweep": {"type": ["object", "null"]},
        "prune": {"type": ["object", "null"]},
        "router_similarity": {"type": ["object", "null"]},
        "eval": {"type": ["object", "null"]}
      }
    },
    "missing": {"type": "array", "items": {"type": "string"}}
  }
}
)";

bool type_matches(const json& doc, const std::string& type) {
    if (type == "object") return doc.is_object();
    if (type == "array") return doc.is_array();
    if (type == "string") return doc.is_string();
    if (type == "number") return doc.is_number();
    if (type == "integer") return doc.is_number_integer() || doc.is_number_unsigned();
    if (type == "boolean") return doc.is_boolean();
    if (type == "null") return doc.is_null();
    return false;
}

std::string validate_node(const json& doc, const json& schema, const std::string& path) {
    if (schema.contains("type")) {
        const json& t = schema["type"];
        bool ok = false;
        if (t.is_string()) {
            ok = type_matches(doc, t.get<std::string>());
        } else if (t.is_array()) {
            for (const auto& alt : t) ok |= type_matches(doc, alt.get<std::string>());
        }
        if (!ok) return path + ": unexpected type";
    }
    if (schema.contains("required") && doc.is_object()) {
        for (const auto& key : schema["required"])
            if (!doc.contains(key.get<std::string>()))
                return path + ": missing required key '" + key.get<std::string>() + "'";
    }
    if (schema.contains("properties") && doc.is_object()) {
        for (const auto& [key, sub] : schema["properties"].items()) {
            if (!doc.contains(key)) continue;
            std::string err = validate_node(doc[key], sub, path + "." + key);
            if (!err.empty()) return err;
        }
    }
    if (schema.contains("items") && doc.is_array()) {
        i64 i = 0;
        for (const auto& item : doc) {
            std::string err =
                validate_node(item, schema["items"], path + "[" + std::to_string(i) + "]");
            if (!err.empty()) return err;
            ++i;
        }
    }
    return "";
}

std::optional<json> try_read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) return std::nullopt;
    json j;
    try {
        in >> j;
    } catch (const json::exception&) {
        return std::nullopt;
    }
    return j;
}

}  // namespace

const std::string& report_schema_text() {
    static const std::string s = kReportSchema;
    return s;
}

std::string validate_against_schema(const json& doc, const json& schema) {
    return validate_node(doc, schema, "report");
}

json emit_report(const std::string& run_dir) {
    const fs::path root(run_dir);
    json report;
    report["version"] = 1;

    if (auto cfg = try_read_json(root / "config.json"))
        report["config"] = *cfg;
    else
        report["config"] = nullptr;

    json sections;
    std::vector<std::string> missing;

    // train log is JSON-lines
    {
        std::ifstream in(root / "train_log.jsonl");
        if (in) {
            json arr = json::array();
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                try {
                    arr.push_back(json::parse(line));
                } catch (const json::exception&) {
                    break;
                }
            }
            sections["train_log"] = arr;
        } else {
            sections["train_log"] = nullptr;
            missing.push_back("train_log");
        }
    }
    for (const char* name : {"sweep", "prune", "eval"}) {
        if (auto j = try_read_json(root / (std::string(name) + ".json"))) {
            sections[name] = *j;
        } else {
            sections[name] = nullptr;
            missing.push_back(name);
        }
    }
    if (auto j = try_read_json(root / "similarity.json")) {
        sections["router_similarity"] = *j;
    } else {
        sections["router_similarity"] = nullptr;
        missing.push_back("router_similarity");
    }

    report["sections"] = sections;
    report["missing"] = missing;

    const json schema = json::parse(report_schema_text());
    const std::string err = validate_against_schema(report, schema);
    if (!err.empty()) throw FormatError("report failed schema validation: " + err);
    return report;
}

}  // namespace elt
