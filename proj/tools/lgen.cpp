// Operator entry point: train the toy denoiser, sample with or without
// layout guidance, score batches with the detector oracle, and run the
// loss-term ablation sweep. Exit codes: 0 success, 1 runtime failure,
// 2 usage or input error.
#include <CLI11.hpp>

#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lgen/attention.hpp"
#include "lgen/evaluation.hpp"
#include "lgen/guidance.hpp"
#include "lgen/image_io.hpp"
#include "lgen/layout.hpp"
#include "lgen/losses.hpp"
#include "lgen/toy_model.hpp"

namespace fs = std::filesystem;
using namespace lgen;

namespace {

// Problems with the invocation or its input files; mapped to exit code 2.
struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

fs::path out_root() {
    const char* env = std::getenv("LGEN_OUT_ROOT");
    return (env != nullptr && *env != '\0') ? fs::path(env) : fs::path(".");
}

fs::path resolve_out(const std::string& given, const char* fallback) {
    return given.empty() ? out_root() / fallback : fs::path(given);
}

void require_readable(const fs::path& p, const char* what) {
    if (!fs::exists(p)) {
        throw usage_error(std::string("cannot read ") + what + " " + p.string());
    }
}

void guard_overwrite(const fs::path& p, bool force) {
    if (fs::exists(p) && !force) {
        throw usage_error("refusing to overwrite " + p.string() + " (pass --force)");
    }
}

std::string read_text(const fs::path& p, const char* what) {
    require_readable(p, what);
    std::ifstream f(p, std::ios::binary);
    if (!f.good()) throw usage_error(std::string("cannot read ") + what + " " + p.string());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_text(const fs::path& p, const std::string& body) {
    std::ofstream f(p, std::ios::binary);
    if (!f.good()) throw std::runtime_error("cannot write " + p.string());
    f << body;
    if (!f.good()) throw std::runtime_error("short write to " + p.string());
}

std::vector<fs::path> collect_files(const fs::path& dir, const std::string& ext) {
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ext) {
            out.push_back(entry.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string join_seeds(const std::vector<uint64_t>& seeds) {
    std::ostringstream s;
    for (size_t i = 0; i < seeds.size(); ++i) s << (i ? "," : "") << seeds[i];
    return s.str();
}

// ---- train ----

struct TrainArgs {
    std::string manifest_path;
    int synth_scenes = 0;
    uint64_t data_seed = 1;
    uint64_t model_seed = 1;
    TrainConfig cfg;
    std::string out;
    bool force = false;
};

void add_train_options(CLI::App* cmd, TrainArgs& a) {
    cmd->add_option("--manifest", a.manifest_path, "scene manifest: `<seed> <count> <color> <shape> ...` per line");
    cmd->add_option("--synth-scenes", a.synth_scenes, "draw this many random scenes instead of reading a manifest")
        ->capture_default_str();
    cmd->add_option("--data-seed", a.data_seed, "seed for the random scene draw")->capture_default_str();
    cmd->add_option("--model-seed", a.model_seed, "seed for parameter initialization")->capture_default_str();
    cmd->add_option("--epochs", a.cfg.epochs, "passes over the dataset")->capture_default_str();
    cmd->add_option("--lr", a.cfg.lr, "Adam learning rate")->capture_default_str();
    cmd->add_option("--batch-size", a.cfg.batch_size, "samples per optimizer step")->capture_default_str();
    cmd->add_option("--cond-dropout", a.cfg.cond_dropout, "rate of replacing the prompt with the null sequence")
        ->capture_default_str();
    cmd->add_option("--seed", a.cfg.seed, "training seed (shuffling, noise, dropout)")->capture_default_str();
    cmd->add_option("--out", a.out, "output directory (default $LGEN_OUT_ROOT/train_out)");
    cmd->add_flag("--force", a.force, "overwrite existing outputs");
}

std::string train_config_ini(const TrainArgs& a) {
    std::ostringstream s;
    s << std::setprecision(17);
    s << "# effective configuration (defaults < config file < command line)\n"
      << "[train]\n";
    if (!a.manifest_path.empty()) s << "manifest=" << a.manifest_path << "\n";
    s << "synth-scenes=" << a.synth_scenes << "\n"
      << "data-seed=" << a.data_seed << "\n"
      << "model-seed=" << a.model_seed << "\n"
      << "epochs=" << a.cfg.epochs << "\n"
      << "lr=" << a.cfg.lr << "\n"
      << "batch-size=" << a.cfg.batch_size << "\n"
      << "cond-dropout=" << a.cfg.cond_dropout << "\n"
      << "seed=" << a.cfg.seed << "\n"
      << "out=" << resolve_out(a.out, "train_out").string() << "\n"
      << "force=" << (a.force ? "true" : "false") << "\n";
    return s.str();
}

int run_train(TrainArgs& a) {
    if (!a.manifest_path.empty() && a.synth_scenes > 0) {
        throw usage_error("pass either --manifest or --synth-scenes, not both");
    }
    std::vector<std::pair<SceneSpec, uint64_t>> entries;
    if (!a.manifest_path.empty()) {
        entries = parse_manifest(read_text(a.manifest_path, "manifest"));
    } else if (a.synth_scenes > 0) {
        std::mt19937_64 rng(a.data_seed);
        for (int i = 0; i < a.synth_scenes; ++i) {
            SceneSpec spec = random_scene_spec(rng);
            entries.emplace_back(std::move(spec), rng());
        }
    } else {
        throw usage_error("train needs --manifest or --synth-scenes");
    }
    if (entries.empty()) throw usage_error("no scenes to train on");

    const fs::path out = resolve_out(a.out, "train_out");
    fs::create_directories(out);
    const fs::path ckpt = out / "checkpoint.bin";
    const fs::path curve = out / "loss_curve.csv";
    const fs::path mani = out / "dataset_manifest.txt";
    const fs::path conf = out / "effective_config.ini";
    for (const fs::path& p : {ckpt, curve, mani, conf}) guard_overwrite(p, a.force);

    std::vector<SyntheticScene> scenes;
    scenes.reserve(entries.size());
    for (const auto& [spec, seed] : entries) scenes.push_back(make_scene(spec, seed));

    ToyDenoiser model = ToyDenoiser::create(DenoiserArch{}, TokenVocabulary::standard(),
                                            NoiseSchedule::linear(), a.model_seed);
    const TrainResult res = train(model, scenes, a.cfg);

    save_checkpoint(ckpt.string(), model);
    std::ostringstream csv;
    csv << std::setprecision(17) << "batch,loss\n";
    for (const auto& [batch, loss] : res.loss_curve) csv << batch << "," << loss << "\n";
    write_text(curve, csv.str());
    write_text(mani, manifest_text(entries));
    write_text(conf, train_config_ini(a));

    std::cout << "trained on " << scenes.size() << " scenes x " << a.cfg.epochs << " epochs ("
              << res.conditioned_samples << "/" << res.total_samples << " samples conditioned)\n"
              << "final batch loss " << std::setprecision(6) << res.loss_curve.back().second << "\n"
              << "wrote " << ckpt.string() << "\n";
    return 0;
}

// ---- generate / ablate ----

struct GenerateArgs {
    std::string checkpoint;
    std::string layout_path;
    std::string out;
    std::vector<uint64_t> seeds{0};
    GuidanceConfig cfg;
    std::string ablation = "rmreg";
    bool no_guidance = false;
    bool force = false;
};

void add_generate_options(CLI::App* cmd, GenerateArgs& a, bool single_mode) {
    cmd->add_option("--checkpoint", a.checkpoint, "trained model checkpoint")->required();
    cmd->add_option("--layout", a.layout_path, "layout file: prompt line, then `phrase <index> <x1> <y1> <x2> <y2>`")
        ->required();
    cmd->add_option("--out", a.out, "output directory");
    cmd->add_option("--seeds", a.seeds, "sampling seeds, comma separated")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--eta", a.cfg.eta, "latent descent step size")->capture_default_str();
    cmd->add_option("--lambda", a.cfg.lambda, "boundary loss weight")->capture_default_str();
    cmd->add_option("--alpha", a.cfg.alpha, "regularization loss weight")->capture_default_str();
    cmd->add_option("--tau", a.cfg.tau, "self-attention enhancement folds")->capture_default_str();
    cmd->add_option("--total-steps", a.cfg.total_steps, "sampler steps")->capture_default_str();
    cmd->add_option("--optim-steps", a.cfg.optim_steps, "leading steps that optimize the latent")
        ->capture_default_str();
    cmd->add_option("--max-inner-iters", a.cfg.max_inner_iters, "descent iterations per optimized step")
        ->capture_default_str();
    cmd->add_option("--early-stop", a.cfg.early_stop_threshold, "loss value that stops the descent")
        ->capture_default_str();
    cmd->add_option("--cfg-weight", a.cfg.cfg_weight, "classifier-free guidance weight")->capture_default_str();
    if (single_mode) {
        cmd->add_option("--ablation", a.ablation, "loss terms to keep: r, rm, or rmreg")
            ->check(CLI::IsMember({"r", "rm", "rmreg"}))
            ->capture_default_str();
        cmd->add_flag("--no-guidance", a.no_guidance, "plain sampler (same as --eta 0)");
    }
    cmd->add_flag("--force", a.force, "overwrite existing outputs");
}

std::string generate_config_ini(const GenerateArgs& a, const char* fallback, bool single_mode) {
    std::ostringstream s;
    s << std::setprecision(17);
    s << "# effective configuration (defaults < config file < command line)\n"
      << (single_mode ? "[generate]\n" : "[ablate]\n")
      << "checkpoint=" << a.checkpoint << "\n"
      << "layout=" << a.layout_path << "\n"
      << "out=" << resolve_out(a.out, fallback).string() << "\n"
      << "seeds=" << join_seeds(a.seeds) << "\n"
      << "eta=" << a.cfg.eta << "\n"
      << "lambda=" << a.cfg.lambda << "\n"
      << "alpha=" << a.cfg.alpha << "\n"
      << "tau=" << a.cfg.tau << "\n"
      << "total-steps=" << a.cfg.total_steps << "\n"
      << "optim-steps=" << a.cfg.optim_steps << "\n"
      << "max-inner-iters=" << a.cfg.max_inner_iters << "\n"
      << "early-stop=" << a.cfg.early_stop_threshold << "\n"
      << "cfg-weight=" << a.cfg.cfg_weight << "\n";
    if (single_mode) {
        s << "ablation=" << a.ablation << "\n"
          << "no-guidance=" << (a.no_guidance ? "true" : "false") << "\n";
    }
    s << "force=" << (a.force ? "true" : "false") << "\n";
    return s.str();
}

void check_seeds(const std::vector<uint64_t>& seeds) {
    if (seeds.empty()) throw usage_error("--seeds needs at least one value");
    std::set<uint64_t> uniq(seeds.begin(), seeds.end());
    if (uniq.size() != seeds.size()) throw usage_error("--seeds has duplicates");
}

int run_generate(GenerateArgs& a) {
    check_seeds(a.seeds);
    a.cfg.ablation = parse_ablation_mode(a.ablation);
    if (a.no_guidance) {
        a.cfg.eta = 0.0;
        a.cfg.optim_steps = 0;
    }
    a.cfg.validate();
    require_readable(a.checkpoint, "checkpoint");
    const ToyDenoiser model = load_checkpoint(a.checkpoint);
    const Layout layout = parse_layout(read_text(a.layout_path, "layout"));
    const bool guided = a.cfg.optimization_enabled() && !layout.empty();

    const fs::path out = resolve_out(a.out, "gen_out");
    fs::create_directories(out);
    std::vector<fs::path> ppm_paths, png_paths, trace_paths, attn_dirs;
    for (uint64_t seed : a.seeds) {
        const std::string stem = "sample_s" + std::to_string(seed);
        ppm_paths.push_back(out / (stem + ".ppm"));
        png_paths.push_back(out / (stem + ".png"));
        trace_paths.push_back(out / ("trace_s" + std::to_string(seed) + ".csv"));
        attn_dirs.push_back(out / ("attn_s" + std::to_string(seed)));
    }
    const fs::path conf = out / "effective_config.ini";
    guard_overwrite(conf, a.force);
    for (size_t i = 0; i < a.seeds.size(); ++i) {
        guard_overwrite(ppm_paths[i], a.force);
        guard_overwrite(png_paths[i], a.force);
        if (guided) {
            guard_overwrite(trace_paths[i], a.force);
            guard_overwrite(attn_dirs[i], a.force);
        }
    }
    write_text(conf, generate_config_ini(a, "gen_out", true));

    for (size_t i = 0; i < a.seeds.size(); ++i) {
        GuidanceConfig cfg = a.cfg;
        cfg.seed = a.seeds[i];
        const GenerationResult res = generate(layout.prompt_tokens, layout, cfg, model);
        write_ppm(ppm_paths[i].string(), res.image);
        write_png(png_paths[i].string(), res.image);
        if (guided) {
            write_trace_csv(trace_paths[i].string(), res.trace);
            fs::create_directories(attn_dirs[i]);
            for (const AttentionDump& d : res.dumps) {
                write_attention_dump((attn_dirs[i] / attention_dump_filename(d.step, d.phrase_index)).string(),
                                     d.map);
            }
        }
        for (const std::string& w : res.warnings) {
            std::cerr << "warning (seed " << a.seeds[i] << "): " << w << "\n";
        }
        std::cout << "seed " << a.seeds[i] << ": wrote " << ppm_paths[i].string();
        if (guided) {
            std::cout << " (" << res.trace.size() << " trace rows, " << res.dumps.size()
                      << " attention dumps)";
        }
        std::cout << "\n";
    }
    return 0;
}

int run_ablate(GenerateArgs& a) {
    check_seeds(a.seeds);
    a.cfg.validate();
    require_readable(a.checkpoint, "checkpoint");
    const ToyDenoiser model = load_checkpoint(a.checkpoint);
    const Layout layout = parse_layout(read_text(a.layout_path, "layout"));
    if (layout.empty()) throw usage_error("ablate needs a layout with at least one constrained phrase");

    const fs::path out = resolve_out(a.out, "ablate_out");
    fs::create_directories(out);
    const fs::path table_path = out / "ablation.csv";
    const fs::path conf = out / "effective_config.ini";
    const std::array<std::string, 4> modes = {"none", "r", "rm", "rmreg"};
    guard_overwrite(table_path, a.force);
    guard_overwrite(conf, a.force);
    for (const std::string& mode : modes) guard_overwrite(out / mode, a.force);
    write_text(conf, generate_config_ini(a, "ablate_out", false));

    struct ModeRow {
        std::string mode;
        double mean_final = std::nan("");
        CountingSummary counting;
    };
    std::vector<ModeRow> table;
    for (const std::string& mode : modes) {
        fs::create_directories(out / mode);
        std::vector<DetectionRow> rows;
        std::vector<LabeledLayout> cases;
        double final_sum = 0.0;
        int final_n = 0;
        for (uint64_t seed : a.seeds) {
            GuidanceConfig cfg = a.cfg;
            cfg.seed = seed;
            if (mode == "none") {
                cfg.eta = 0.0;
                cfg.optim_steps = 0;
            } else {
                cfg.ablation = parse_ablation_mode(mode);
            }
            const GenerationResult res = generate(layout.prompt_tokens, layout, cfg, model);
            const std::string id = "s" + std::to_string(seed);
            write_ppm((out / mode / ("sample_" + id + ".ppm")).string(), res.image);
            for (DetectionRow& r : run_detector(id, res.image, layout)) rows.push_back(std::move(r));
            cases.push_back(LabeledLayout{id, layout});
            if (!res.trace.empty()) {
                final_sum += res.trace.back().loss.combined;
                ++final_n;
            }
            for (const std::string& w : res.warnings) {
                std::cerr << "warning (" << mode << ", seed " << seed << "): " << w << "\n";
            }
        }
        const MetricsReport rep = score_detections(rows, cases);
        table.push_back(ModeRow{mode, final_n > 0 ? final_sum / final_n : std::nan(""), rep.counting});
    }

    std::ostringstream csv;
    csv << "mode,mean_final_L_mac,precision,recall,f1\n" << std::setprecision(17);
    for (const ModeRow& r : table) {
        csv << r.mode << ",";
        if (std::isfinite(r.mean_final)) csv << r.mean_final;
        csv << "," << r.counting.precision << "," << r.counting.recall << "," << r.counting.f1 << "\n";
    }
    write_text(table_path, csv.str());

    std::cout << std::left << std::setw(8) << "mode" << std::right << std::setw(16) << "final_L_mac"
              << std::setw(10) << "P" << std::setw(10) << "R" << std::setw(10) << "F1" << "\n"
              << std::fixed << std::setprecision(2);
    for (const ModeRow& r : table) {
        std::cout << std::left << std::setw(8) << r.mode << std::right << std::setw(16);
        if (std::isfinite(r.mean_final)) {
            std::cout << std::setprecision(4) << r.mean_final << std::setprecision(2);
        } else {
            std::cout << "-";
        }
        std::cout << std::setw(10) << r.counting.precision << std::setw(10) << r.counting.recall
                  << std::setw(10) << r.counting.f1 << "\n";
    }
    std::cout << "wrote " << table_path.string() << "\n";
    return 0;
}

// ---- eval ----

struct EvalArgs {
    std::string images_dir;
    std::string detections_path;
    std::string layouts_dir;
    std::string out;
    bool force = false;
};

void add_eval_options(CLI::App* cmd, EvalArgs& a) {
    cmd->add_option("--images", a.images_dir, "directory of .ppm images named <image_id>.ppm");
    cmd->add_option("--detections", a.detections_path, "detections CSV to score instead of running the detector");
    cmd->add_option("--layouts", a.layouts_dir, "directory of .layout ground-truth files named <image_id>.layout")
        ->required();
    cmd->add_option("--out", a.out, "output directory (default $LGEN_OUT_ROOT/eval_out)");
    cmd->add_flag("--force", a.force, "overwrite existing outputs");
}

std::string eval_config_ini(const EvalArgs& a) {
    std::ostringstream s;
    s << "# effective configuration (defaults < config file < command line)\n"
      << "[eval]\n";
    if (!a.images_dir.empty()) s << "images=" << a.images_dir << "\n";
    if (!a.detections_path.empty()) s << "detections=" << a.detections_path << "\n";
    s << "layouts=" << a.layouts_dir << "\n"
      << "out=" << resolve_out(a.out, "eval_out").string() << "\n"
      << "force=" << (a.force ? "true" : "false") << "\n";
    return s.str();
}

int run_eval(EvalArgs& a) {
    if (a.images_dir.empty() == a.detections_path.empty()) {
        throw usage_error("eval needs exactly one of --images or --detections");
    }
    require_readable(a.layouts_dir, "layouts directory");
    const std::vector<fs::path> layout_files = collect_files(a.layouts_dir, ".layout");
    if (layout_files.empty()) throw usage_error("no .layout files in " + a.layouts_dir);
    std::vector<LabeledLayout> cases;
    cases.reserve(layout_files.size());
    for (const fs::path& p : layout_files) {
        cases.push_back(LabeledLayout{p.stem().string(), parse_layout(read_text(p, "layout"))});
    }

    std::vector<DetectionRow> rows;
    const bool from_images = !a.images_dir.empty();
    if (from_images) {
        require_readable(a.images_dir, "images directory");
        const std::vector<fs::path> image_files = collect_files(a.images_dir, ".ppm");
        if (image_files.size() != cases.size()) {
            throw usage_error("count mismatch: " + std::to_string(image_files.size()) + " images vs " +
                              std::to_string(cases.size()) + " layouts");
        }
        std::map<std::string, const Layout*> by_id;
        for (const LabeledLayout& c : cases) by_id[c.id] = &c.layout;
        for (const fs::path& p : image_files) {
            const std::string id = p.stem().string();
            auto it = by_id.find(id);
            if (it == by_id.end()) throw usage_error("no layout for image " + id);
            for (DetectionRow& r : run_detector(id, read_ppm(p.string()), *it->second)) {
                rows.push_back(std::move(r));
            }
        }
    } else {
        rows = read_detections_csv(
            (require_readable(a.detections_path, "detections"), a.detections_path));
    }

    const MetricsReport rep = score_detections(rows, cases);

    const fs::path out = resolve_out(a.out, "eval_out");
    fs::create_directories(out);
    const fs::path json_path = out / "metrics.json";
    const fs::path prompt_path = out / "per_prompt.csv";
    const fs::path det_path = out / "detections.csv";
    const fs::path conf = out / "effective_config.ini";
    guard_overwrite(json_path, a.force);
    guard_overwrite(prompt_path, a.force);
    guard_overwrite(conf, a.force);
    if (from_images) guard_overwrite(det_path, a.force);

    write_metrics_json(json_path.string(), rep);
    write_per_prompt_csv(prompt_path.string(), rep);
    if (from_images) write_detections_csv(det_path.string(), rows);
    write_text(conf, eval_config_ini(a));

    std::cout << std::fixed << std::setprecision(2) << "counting: P=" << rep.counting.precision
              << " R=" << rep.counting.recall << " F1=" << rep.counting.f1
              << (rep.counting.degenerate ? " (degenerate)" : "") << "\n"
              << "spatial: " << rep.spatial_acc << "  size: " << rep.size_acc
              << "  color: " << rep.color_acc << "\n"
              << "cases: " << cases.size() << "  detections: " << rows.size() << "\n"
              << "wrote " << json_path.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"layout-guided toy diffusion: train, generate, eval, ablate"};
    app.require_subcommand(1);
    app.set_config("--config", "", "INI file with options under a [<subcommand>] section");

    TrainArgs train_args;
    GenerateArgs gen_args;
    GenerateArgs ablate_args;
    EvalArgs eval_args;

    CLI::App* sub_train = app.add_subcommand("train", "train the toy denoiser on synthetic scenes");
    add_train_options(sub_train, train_args);
    CLI::App* sub_gen = app.add_subcommand("generate", "sample images, optionally layout-guided");
    add_generate_options(sub_gen, gen_args, true);
    CLI::App* sub_eval = app.add_subcommand("eval", "score images or detections against layouts");
    add_eval_options(sub_eval, eval_args);
    CLI::App* sub_ablate = app.add_subcommand("ablate", "compare loss-term modes on one layout");
    add_generate_options(sub_ablate, ablate_args, false);
    // --config lives on the top-level app; let it be spelled after the subcommand too
    for (CLI::App* sub : {sub_train, sub_gen, sub_eval, sub_ablate}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sub_train->parsed()) return run_train(train_args);
        if (sub_gen->parsed()) return run_generate(gen_args);
        if (sub_eval->parsed()) return run_eval(eval_args);
        if (sub_ablate->parsed()) return run_ablate(ablate_args);
    } catch (const usage_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const parse_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
