#pragma once

#include <string>

#include "json.hpp"
#include "langneck/io.hpp"
#include "langneck/train.hpp"

namespace langneck {

inline nlohmann::json report_json(const MetricsReport& r) {
    nlohmann::json j;
    j["method"] = r.method;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    j["version"] = r.version;
    j["warmup_loss"] = r.warmup_loss;
    j["epoch_class_loss"] = r.epoch_class_loss;
    j["epoch_sim_loss"] = r.epoch_sim_loss;
    j["epoch_llm_loss"] = r.epoch_llm_loss;
    j["val_soft_acc"] = r.val_soft_acc;
    j["val_hard_acc"] = r.val_hard_acc;
    j["val_norep_acc"] = r.val_norep_acc;
    j["mean_cosine"] = r.mean_cosine;
    j["mean_llm_nll"] = r.mean_llm_nll;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows)
        rows.push_back({{"method", row.method},
                        {"corruption", row.corruption},
                        {"severity", row.severity},
                        {"accuracy", row.accuracy},
                        {"cosine", row.cosine},
                        {"llm_nll", row.llm_nll}});
    j["rows"] = rows;
    return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.version = j.at("version").get<std::string>();
    r.warmup_loss = j.at("warmup_loss").get<std::vector<double>>();
    r.epoch_class_loss = j.at("epoch_class_loss").get<std::vector<double>>();
    r.epoch_sim_loss = j.at("epoch_sim_loss").get<std::vector<double>>();
    r.epoch_llm_loss = j.at("epoch_llm_loss").get<std::vector<double>>();
    r.val_soft_acc = j.at("val_soft_acc").get<double>();
    r.val_hard_acc = j.at("val_hard_acc").get<double>();
    r.val_norep_acc = j.at("val_norep_acc").get<double>();
    r.mean_cosine = j.at("mean_cosine").get<double>();
    r.mean_llm_nll = j.at("mean_llm_nll").get<double>();
    for (const auto& row : j.at("rows"))
        r.rows.push_back({row.at("method").get<std::string>(),
                          row.at("corruption").get<std::string>(),
                          row.at("severity").get<int>(), row.at("accuracy").get<double>(),
                          row.at("cosine").get<double>(), row.at("llm_nll").get<double>()});
    return r;
}

// Writes the CSV and the machine-readable JSON report side by side;
// both are deterministic functions of the report contents.
inline void emit_report(const MetricsReport& r, const std::string& csv_path,
                        const std::string& json_path) {
    write_file(csv_path, report_csv(r));
    write_file(json_path, report_json(r).dump(2) + "\n");
}

}  // namespace langneck
