// Command-line front end: tokenizer training, synthetic data generation,
// training, ablation grids, and evaluation. Exit codes: 0 success,
// 1 runtime failure, 2 usage/config error.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sycoca/sycoca.hpp"

namespace {

using namespace sycoca;

std::vector<std::string> load_corpus_lines(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open corpus: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');  // manifest lines carry path<TAB>caption
        lines.push_back(tab == std::string::npos ? line : line.substr(tab + 1));
    }
    if (lines.empty()) throw InputError("corpus is empty: " + path);
    return lines;
}

struct LoadedModel {
    Checkpoint ckpt;
    Vocabulary vocab;
};

LoadedModel load_model(const std::string& ckpt_path) {
    LoadedModel m;
    m.ckpt = load_checkpoint(ckpt_path);
    m.vocab = load_vocabulary(m.ckpt.config.vocab_file);
    if (m.vocab.size != m.ckpt.config.model.vocab_size)
        throw ConfigError("vocabulary size " + std::to_string(m.vocab.size) +
                          " does not match checkpoint vocab_size " +
                          std::to_string(m.ckpt.config.model.vocab_size));
    return m;
}

TrainData data_from_manifest(const std::string& manifest, const RunConfig& cfg,
                             const Vocabulary& vocab) {
    RunConfig c = cfg;
    c.data_source = DataSource::Manifest;
    c.manifest_path = manifest;
    return prepare_train_data(c, vocab);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void emit(const std::string& text, const std::string& results_path) {
    std::cout << text;
    if (!results_path.empty()) {
        std::ofstream f(results_path, std::ios::trunc);
        if (!f) throw IoError("cannot open results file: " + results_path);
        f << text;
    }
}

int cmd_tokenizer_train(const std::string& corpus, int vocab_size, const std::string& out) {
    const Vocabulary vocab = train_bpe(load_corpus_lines(corpus), vocab_size);
    save_vocabulary(vocab, out);
    std::cout << "wrote " << out << " (" << vocab.size << " tokens, " << vocab.merges.size()
              << " merges)\n";
    return 0;
}

int cmd_make_synthetic(int count, std::uint64_t seed, const std::string& out_dir, int image_hw,
                       const std::string& mode) {
    SyntheticSpec spec;
    spec.count = count;
    spec.seed = seed;
    spec.image_hw = image_hw;
    spec.exhaustive = mode == "exhaustive";
    const auto pairs = generate_synthetic(spec);

    std::filesystem::create_directories(out_dir);
    std::ofstream manifest(out_dir + "/manifest.tsv", std::ios::trunc);
    std::ofstream captions(out_dir + "/captions.txt", std::ios::trunc);
    if (!manifest || !captions) throw IoError("cannot write into " + out_dir);
    char name[32];
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
        save_image_ppm(pairs[i].image, out_dir + "/" + name);
        manifest << name << "\t" << pairs[i].caption << "\n";
        captions << pairs[i].caption << "\n";
    }
    std::cout << "wrote " << pairs.size() << " pairs to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
    const RunConfig cfg = load_config(config_path);
    cfg.validate();
    const Vocabulary vocab = load_vocabulary(cfg.vocab_file);
    Trainer<float> trainer(cfg, vocab);
    if (!resume.empty()) trainer.restore(load_checkpoint(resume));
    trainer.run();
    std::cout << "trained to step " << trainer.step() << "; checkpoint: "
              << trainer.config().checkpoint_path << "; log: " << trainer.config().log_path
              << "\n";
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& grid) {
    const RunConfig cfg = load_config(config_path);
    cfg.validate();
    const Vocabulary vocab = load_vocabulary(cfg.vocab_file);
    std::vector<AblationRow> rows;
    if (grid == "table6")
        rows = table6_rows();
    else if (grid == "table7")
        rows = table7_rows();
    else
        rows = load_custom_grid(grid);

    const auto results = run_ablation_grid<float>(cfg, rows, vocab);
    std::ostringstream out;
    out << ablation_header() << "\n";
    for (const auto& r : results) out << ablation_line(r) << "\n";
    emit(out.str(), cfg.results_path);
    for (const auto& r : results)
        if (!r.ok) return 1;
    return 0;
}

int cmd_eval_retrieval(const std::string& ckpt_path, const std::string& manifest) {
    const LoadedModel m = load_model(ckpt_path);
    const TrainData data = data_from_manifest(manifest, m.ckpt.config, m.vocab);
    Parameters<float> params = m.ckpt.params;
    const auto [zi, zt] = embed_dataset(params, data);
    const auto ret = retrieval_recall(zi, zt);

    std::ostringstream out;
    out << "direction\tR@1\tR@5\tR@10\tn\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf), "image->text\t%.4f\t%.4f\t%.4f\t%d\n",
                  ret.image_to_text.recall_at.at(1), ret.image_to_text.recall_at.at(5),
                  ret.image_to_text.recall_at.at(10), ret.image_to_text.n);
    out << buf;
    std::snprintf(buf, sizeof(buf), "text->image\t%.4f\t%.4f\t%.4f\t%d\n",
                  ret.text_to_image.recall_at.at(1), ret.text_to_image.recall_at.at(5),
                  ret.text_to_image.recall_at.at(10), ret.text_to_image.n);
    out << buf;
    std::snprintf(buf, sizeof(buf), "mTR\t%.4f\nmIR\t%.4f\n", ret.mtr, ret.mir);
    out << buf;
    emit(out.str(), m.ckpt.config.results_path);
    return 0;
}

int cmd_eval_classify(const std::string& ckpt_path, const std::string& classes_csv,
                      const std::string& manifest) {
    const LoadedModel m = load_model(ckpt_path);
    const auto classes = split_csv(classes_csv);
    if (classes.size() < 2) throw InputError("need at least 2 comma-separated classes");
    const auto records = load_manifest(manifest);
    const std::string dir = path_dirname(manifest);
    Parameters<float> params = m.ckpt.params;

    std::ostringstream out;
    out << "id\tpredicted\ttruth\n";
    int hits = 0, labeled = 0;
    for (const auto& rec : records) {
        const std::string path =
            rec.image_source.front() == '/' ? rec.image_source : dir + "/" + rec.image_source;
        const ImageTensor img = load_image_ppm(path);
        const auto cls =
            zero_shot_classify(params, m.vocab, img, classes, m.ckpt.config.prompt_template);
        int truth = -1;
        for (std::size_t c = 0; c < classes.size(); ++c)
            if (rec.caption.find(classes[c]) != std::string::npos) {
                truth = static_cast<int>(c);
                break;
            }
        if (truth >= 0) {
            ++labeled;
            hits += truth == cls.label ? 1 : 0;
        }
        out << rec.id << "\t" << classes[static_cast<std::size_t>(cls.label)] << "\t"
            << (truth >= 0 ? classes[static_cast<std::size_t>(truth)] : std::string("?")) << "\n";
    }
    if (labeled > 0) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "accuracy\t%.4f\n",
                      static_cast<double>(hits) / labeled);
        out << buf;
    }
    emit(out.str(), m.ckpt.config.results_path);
    return 0;
}

int cmd_caption(const std::string& ckpt_path, const std::string& image_path) {
    const LoadedModel m = load_model(ckpt_path);
    Parameters<float> params = m.ckpt.params;
    const ImageTensor img = load_image_ppm(image_path);
    const auto cap = caption_greedy(params, m.vocab, img, m.ckpt.config.model.max_text_len);
    std::cout << cap.text << "\n";
    return 0;
}

int cmd_reconstruct(const std::string& ckpt_path, const std::string& image_path,
                    const std::string& caption, const std::string& mode, const std::string& out,
                    const std::string& heatmap) {
    const LoadedModel m = load_model(ckpt_path);
    Parameters<float> params = m.ckpt.params;
    const ImageTensor img = load_image_ppm(image_path);
    const MaskingMode mm = mode == "attentive" ? MaskingMode::Attentive : MaskingMode::Random;
    const bool use_cross = !m.ckpt.config.objectives.mim;
    const auto res = reconstruct(params, m.vocab, img, caption, m.ckpt.config.model.r_h, mm,
                                 m.ckpt.config.seed, use_cross);
    save_image_ppm(res.composite, out);
    if (!heatmap.empty())
        export_heatmap(res.scores, m.ckpt.config.model.grid_hw(), m.ckpt.config.model.grid_hw(),
                       heatmap);
    std::printf("masked-patch L1: %.6f (%d/%d patches masked); wrote %s\n", res.masked_l1,
                res.high.popcount(), res.high.bits.empty() ? 0 : static_cast<int>(res.high.bits.size()),
                out.c_str());
    return 0;
}

int cmd_print_config(const std::string& config_path) {
    const RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    std::cout << serialize_config(cfg);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SyCoCa: symmetric contrastive captioner pretraining at desk scale"};
    app.require_subcommand(1);

    std::string corpus, out_path, config_path, resume, grid, ckpt, manifest, image_path;
    std::string caption_text, mode = "attentive", heatmap, classes_csv, synth_mode = "exhaustive";
    int vocab_size = 512, count = 72, image_hw = 32;
    std::uint64_t seed = 7;

    auto* tok = app.add_subcommand("tokenizer-train", "Train a BPE vocabulary from a text corpus");
    tok->add_option("--corpus", corpus, "Corpus file (plain lines or TSV manifest)")->required();
    tok->add_option("--vocab-size", vocab_size, "Total vocabulary size (default 512)");
    tok->add_option("--out", out_path, "Output vocabulary file")->required();

    auto* synth = app.add_subcommand("make-synthetic", "Generate the synthetic shapes dataset");
    synth->add_option("--count", count, "Number of pairs")->required();
    synth->add_option("--seed", seed, "Generator seed");
    synth->add_option("--out", out_path, "Output directory")->required();
    synth->add_option("--image-hw", image_hw, "Image height/width (default 32)");
    synth->add_option("--mode", synth_mode, "exhaustive|random (default exhaustive)")
        ->check(CLI::IsMember({"exhaustive", "random"}));

    auto* train = app.add_subcommand("train", "Train from a config file");
    train->add_option("--config", config_path, "Config file")->required();
    train->add_option("--resume", resume, "Checkpoint to resume from");

    auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
    ablate->add_option("--config", config_path, "Base config file")->required();
    ablate->add_option("--grid", grid, "table6 | table7 | custom grid file")->required();

    auto* evr = app.add_subcommand("eval-retrieval", "Zero-shot retrieval over a manifest");
    evr->add_option("--ckpt", ckpt, "Checkpoint")->required();
    evr->add_option("--manifest", manifest, "Manifest file")->required();

    auto* evc = app.add_subcommand("eval-classify", "Zero-shot classification over a manifest");
    evc->add_option("--ckpt", ckpt, "Checkpoint")->required();
    evc->add_option("--classes", classes_csv, "Comma-separated class names")->required();
    evc->add_option("--manifest", manifest, "Manifest file")->required();

    auto* cap = app.add_subcommand("caption", "Greedy-caption one image");
    cap->add_option("--ckpt", ckpt, "Checkpoint")->required();
    cap->add_option("--image", image_path, "PPM image")->required();

    auto* rec = app.add_subcommand("reconstruct", "Masked reconstruction of one image");
    rec->add_option("--ckpt", ckpt, "Checkpoint")->required();
    rec->add_option("--image", image_path, "PPM image")->required();
    rec->add_option("--caption", caption_text, "Guiding caption")->required();
    rec->add_option("--mode", mode, "attentive|random")
        ->check(CLI::IsMember({"attentive", "random"}));
    rec->add_option("--out", out_path, "Output PPM")->required();
    rec->add_option("--heatmap", heatmap, "Optional patch-score heatmap PGM");

    auto* pc = app.add_subcommand("print-config", "Print the (default or loaded) config");
    pc->add_option("--config", config_path, "Config file to echo back");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "sycoca: " << e.what() << "\n";
        return 2;
    }

    try {
        if (tok->parsed()) return cmd_tokenizer_train(corpus, vocab_size, out_path);
        if (synth->parsed()) return cmd_make_synthetic(count, seed, out_path, image_hw, synth_mode);
        if (train->parsed()) return cmd_train(config_path, resume);
        if (ablate->parsed()) return cmd_ablate(config_path, grid);
        if (evr->parsed()) return cmd_eval_retrieval(ckpt, manifest);
        if (evc->parsed()) return cmd_eval_classify(ckpt, classes_csv, manifest);
        if (cap->parsed()) return cmd_caption(ckpt, image_path);
        if (rec->parsed())
            return cmd_reconstruct(ckpt, image_path, caption_text, mode, out_path, heatmap);
        if (pc->parsed()) return cmd_print_config(config_path);
    } catch (const ConfigError& e) {
        std::cerr << "sycoca: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "sycoca: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
