#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uedkl/base_learner.hpp"
#include "uedkl/ensemble.hpp"

namespace uedkl {

// One scored item. `probs`/`vars` are the combined per-class prediction and
// its variance, `u` their left-to-right sum, `pred` the argmax label. The
// optional per-learner blocks carry everything stage-2 training needs, so the
// ensemble never re-runs base forward passes.
struct PredictionRecord {
    int64_t id = 0;
    std::string label;  // true label string
    bool unseen = false;
    std::vector<double> probs;
    std::vector<double> vars;
    double u = 0.0;
    std::string pred;
    std::vector<BasePrediction> learners;  // empty unless cached for stage 2
};

namespace pred_detail {

inline nlohmann::ordered_json mat_to_json(const Mat& m) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (int i = 0; i < m.rows(); ++i) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Mat mat_from_json(const nlohmann::json& rows, const std::string& what) {
    if (!rows.is_array() || rows.empty() || !rows[0].is_array())
        throw IoError("predictions: " + what + " must be a nested array");
    Mat m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
    for (int i = 0; i < m.rows(); ++i) {
        const nlohmann::json& row = rows[static_cast<size_t>(i)];
        if (!row.is_array() || static_cast<int>(row.size()) != m.cols())
            throw IoError("predictions: ragged rows in " + what);
        for (int j = 0; j < m.cols(); ++j) m(i, j) = row[static_cast<size_t>(j)].get<double>();
    }
    return m;
}

}  // namespace pred_detail

inline nlohmann::ordered_json prediction_to_json(const PredictionRecord& r) {
    nlohmann::ordered_json line;
    line["id"] = r.id;
    line["label"] = r.label;
    line["unseen"] = r.unseen;
    line["probs"] = r.probs;
    line["vars"] = r.vars;
    line["u"] = r.u;
    line["pred"] = r.pred;
    if (!r.learners.empty()) {
        nlohmann::ordered_json learners = nlohmann::ordered_json::array();
        for (const BasePrediction& p : r.learners) {
            nlohmann::ordered_json block;
            block["probs"] = pred_detail::mat_to_json(p.probs);
            block["cov"] = pred_detail::mat_to_json(p.cov);
            block["samples"] = pred_detail::mat_to_json(p.samples);
            learners.push_back(std::move(block));
        }
        line["learners"] = std::move(learners);
    }
    return line;
}

inline PredictionRecord prediction_from_json(const nlohmann::json& line) {
    if (!line.is_object()) throw IoError("predictions: each line must be a JSON object");
    PredictionRecord r;
    try {
        r.id = line.at("id").get<int64_t>();
        r.label = line.at("label").get<std::string>();
        r.unseen = line.at("unseen").get<bool>();
        r.probs = line.at("probs").get<std::vector<double>>();
        r.vars = line.at("vars").get<std::vector<double>>();
        r.u = line.at("u").get<double>();
        r.pred = line.at("pred").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("predictions: missing or mistyped field: ") + e.what());
    }
    if (r.probs.size() != r.vars.size() || r.probs.empty())
        throw IoError("predictions: probs/vars must be same-length and nonempty");
    if (line.contains("learners")) {
        for (const nlohmann::json& block : line.at("learners")) {
            BasePrediction p;
            p.probs = pred_detail::mat_from_json(block.at("probs"), "learner probs");
            p.cov = pred_detail::mat_from_json(block.at("cov"), "learner cov");
            p.samples = pred_detail::mat_from_json(block.at("samples"), "learner samples");
            r.learners.push_back(std::move(p));
        }
    }
    return r;
}

inline void write_predictions(const std::string& path,
                              const std::vector<PredictionRecord>& records) {
    std::string text;
    for (const PredictionRecord& r : records) {
        text += prediction_to_json(r).dump();
        text += "\n";
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("predictions: cannot write '" + tmp + "'");
        out << text;
        if (!out) throw IoError("predictions: write failure on '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("predictions: cannot rename '" + tmp + "' to '" + path + "'");
}

inline std::vector<PredictionRecord> read_predictions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("predictions: cannot open '" + path + "'");
    std::vector<PredictionRecord> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json row = nlohmann::json::parse(line, nullptr, false);
        if (row.is_discarded())
            throw IoError("predictions: '" + path + "' line " + std::to_string(line_no) +
                          " is not valid JSON");
        out.push_back(prediction_from_json(row));
    }
    return out;
}

// Converts cached records into stage-2 training items. Every record must
// carry learner blocks and a label present in `labels`.
inline std::vector<PreparedEnsembleItem> records_to_items(
    const std::vector<PredictionRecord>& records, const std::vector<std::string>& labels) {
    const int num_classes = static_cast<int>(labels.size());
    std::vector<PreparedEnsembleItem> items;
    items.reserve(records.size());
    for (const PredictionRecord& r : records) {
        if (r.learners.empty())
            throw ContractError("records_to_items: record " + std::to_string(r.id) +
                                " has no cached learner blocks");
        int label_index = -1;
        for (int c = 0; c < num_classes; ++c)
            if (labels[static_cast<size_t>(c)] == r.label) label_index = c;
        if (label_index < 0)
            throw ContractError("records_to_items: label '" + r.label +
                                "' is not a training class");
        items.push_back(prepare_ensemble_item(r.learners, num_classes, label_index));
    }
    return items;
}

}  // namespace uedkl
