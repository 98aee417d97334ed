// Ablation driver: trains a grid of objective/masking configurations with
// a shared seed and data order, then evaluates train-set retrieval and
// held-out zero-shot shape classification per row.
#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sycoca/config.hpp"
#include "sycoca/errors.hpp"
#include "sycoca/eval.hpp"
#include "sycoca/trainer.hpp"

namespace sycoca {

struct AblationRow {
    std::string label;
    Objectives objectives;
    MaskingMode masking = MaskingMode::Random;
    double r_h = -1.0;  // < 0 keeps the base config's ratio
    double r_l = -1.0;
};

inline std::vector<AblationRow> table6_rows() {
    auto obj = [](bool itc, bool ic, bool mim, bool tgmim) {
        Objectives o;
        o.itc = itc;
        o.ic = ic;
        o.mim = mim;
        o.tgmim = tgmim;
        return o;
    };
    return {
        {"itc", obj(true, false, false, false), MaskingMode::Random, -1, -1},
        {"itc+ic (coca)", obj(true, true, false, false), MaskingMode::Random, -1, -1},
        {"itc+ic+am", obj(true, true, false, false), MaskingMode::Attentive, -1, -1},
        {"itc+ic+mim+rm", obj(true, true, true, false), MaskingMode::Random, -1, -1},
        {"itc+ic+mim+am", obj(true, true, true, false), MaskingMode::Attentive, -1, -1},
        {"itc+ic+tgmim+rm", obj(true, true, false, true), MaskingMode::Random, -1, -1},
        {"itc+ic+tgmim+am (sycoca)", obj(true, true, false, true), MaskingMode::Attentive, -1, -1},
    };
}

// Ratio grid over {25, 50, 75}% with r_l + r_h <= 100%.
inline std::vector<AblationRow> table7_rows() {
    Objectives full;
    full.itc = full.ic = full.tgmim = true;
    full.mim = false;
    std::vector<AblationRow> rows;
    const double ratios[] = {0.25, 0.5, 0.75};
    for (double rl : ratios)
        for (double rh : ratios) {
            if (rl + rh > 1.0 + 1e-12) continue;
            std::ostringstream label;
            label << "rl" << static_cast<int>(rl * 100) << "_rh" << static_cast<int>(rh * 100);
            rows.push_back({label.str(), full, MaskingMode::Attentive, rh, rl});
        }
    return rows;
}

// Custom grid file: one row per line, "label<TAB>key=value ...", keys in
// {itc, ic, mim, tgmim, masking, r_h, r_l}.
inline std::vector<AblationRow> load_custom_grid(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open grid file: " + path);
    std::vector<AblationRow> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw FormatError("grid line " + std::to_string(line_no) + ": expected TAB after label");
        AblationRow row;
        row.label = line.substr(0, tab);
        row.objectives = Objectives{false, false, false, false};
        std::istringstream rest(line.substr(tab + 1));
        std::string kv;
        while (rest >> kv) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw FormatError("grid line " + std::to_string(line_no) + ": expected key=value");
            const std::string key = kv.substr(0, eq);
            const std::string value = kv.substr(eq + 1);
            try {
                if (key == "itc")
                    row.objectives.itc = detail::parse_bool(value);
                else if (key == "ic")
                    row.objectives.ic = detail::parse_bool(value);
                else if (key == "mim")
                    row.objectives.mim = detail::parse_bool(value);
                else if (key == "tgmim")
                    row.objectives.tgmim = detail::parse_bool(value);
                else if (key == "masking")
                    row.masking = value == "attentive" ? MaskingMode::Attentive
                                                       : MaskingMode::Random;
                else if (key == "r_h")
                    row.r_h = std::stod(value);
                else if (key == "r_l")
                    row.r_l = std::stod(value);
                else
                    throw FormatError("grid line " + std::to_string(line_no) + ": unknown key \"" +
                                      key + "\"");
            } catch (const FormatError&) {
                throw;
            } catch (const std::exception& e) {
                throw FormatError("grid line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

struct AblationResult {
    std::string label;
    Objectives objectives;
    MaskingMode masking = MaskingMode::Random;
    bool ok = false;
    std::string error;
    LossBreakdown final_loss;
    double mtr = 0.0, mir = 0.0;
    double r1_i2t = 0.0, r1_t2i = 0.0;
    double cls_accuracy = 0.0;
};

inline RunConfig apply_row(RunConfig cfg, const AblationRow& row) {
    cfg.objectives = row.objectives;
    cfg.masking = row.masking;
    if (row.r_h >= 0) cfg.model.r_h = row.r_h;
    if (row.r_l >= 0) cfg.model.r_l = row.r_l;
    return cfg;
}

inline std::string ablation_header() {
    return "label\titc\tic\tmim\ttgmim\tmasking\tl_total\tmTR\tmIR\tR1_i2t\tR1_t2i\tcls_acc";
}

inline std::string ablation_line(const AblationResult& r) {
    if (!r.ok) return r.label + "\terror: " + r.error;
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%s\t%d\t%d\t%d\t%d\t%s\t%.6g\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f",
                  r.label.c_str(), r.objectives.itc ? 1 : 0, r.objectives.ic ? 1 : 0,
                  r.objectives.mim ? 1 : 0, r.objectives.tgmim ? 1 : 0,
                  r.masking == MaskingMode::Attentive ? "am" : "rm", r.final_loss.total, r.mtr,
                  r.mir, r.r1_i2t, r.r1_t2i, r.cls_accuracy);
    return std::string(buf);
}

// Trains every row from the same init seed and data order; rows that fail
// are reported and the grid continues.
template <class Real>
std::vector<AblationResult> run_ablation_grid(const RunConfig& base,
                                              const std::vector<AblationRow>& rows,
                                              const Vocabulary& vocab) {
    std::vector<AblationResult> results;
    const TrainData data = prepare_train_data(base, vocab);

    // Held-out renders for zero-shot shape classification.
    SyntheticSpec holdout;
    holdout.count = 64;
    holdout.image_hw = base.model.image_hw;
    holdout.seed = mix_seed(base.synthetic_seed, 0xe7a1, 0);
    holdout.exhaustive = false;
    holdout.patch_size = base.model.patch_size;
    const auto holdout_pairs = generate_synthetic(holdout);
    const std::vector<std::string> shape_classes = {"circle", "square", "triangle"};

    for (const auto& row : rows) {
        AblationResult res;
        res.label = row.label;
        res.objectives = row.objectives;
        res.masking = row.masking;
        try {
            const RunConfig cfg = apply_row(base, row);
            cfg.validate();
            Trainer<Real> trainer(cfg, vocab, data);
            LossBreakdown last;
            while (trainer.step() < cfg.schedule.total_steps) last = trainer.step_once().losses;
            res.final_loss = last;

            const auto [zi, zt] = embed_dataset(trainer.params(), data);
            const auto ret = retrieval_recall(zi, zt);
            res.mtr = ret.mtr;
            res.mir = ret.mir;
            res.r1_i2t = ret.image_to_text.recall_at.at(1);
            res.r1_t2i = ret.text_to_image.recall_at.at(1);

            int hits = 0;
            for (const auto& pair : holdout_pairs) {
                const auto cls = zero_shot_classify(trainer.params(), vocab, pair.image,
                                                    shape_classes, base.prompt_template);
                hits += cls.label == pair.shape ? 1 : 0;
            }
            res.cls_accuracy = static_cast<double>(hits) / holdout_pairs.size();
            res.ok = true;
        } catch (const std::exception& e) {
            res.ok = false;
            res.error = e.what();
        }
        results.push_back(std::move(res));
    }
    return results;
}

}  // namespace sycoca
