#pragma once

// Command-line interface: synth | reconstruct | render | eval.

#include "fieldchain/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fieldchain {

namespace detail {

inline Config load_cfg_with_env(const std::string& path) {
    Config cfg = path.empty() ? Config{} : Config::from_file(path);
    cfg.apply_env_overrides();
    return cfg;
}

}  // namespace detail

inline int cli_main(int argc, const char* const* argv) {
    CLI::App app{"incremental tri-plane reconstruction from monocular sequences"};
    app.require_subcommand(1);

    // ---- synth -------------------------------------------------------------
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_spec, synth_out;
    uint64_t synth_seed = 1;
    synth->add_option("--spec", synth_spec, "scene spec config file");
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    synth->add_option("--seed", synth_seed, "scene seed");

    // ---- reconstruct ---------------------------------------------------------
    auto* rec = app.add_subcommand("reconstruct", "run the incremental reconstruction");
    std::string rec_data, rec_cfg_path, rec_out;
    uint64_t rec_seed = 0;
    int rec_test_every = -1, rec_iters = -1, rec_coarse = -1, rec_fine = -1;
    rec->add_option("--data", rec_data, "dataset directory")->required();
    rec->add_option("--config", rec_cfg_path, "run config file");
    rec->add_option("--out", rec_out, "output directory")->required();
    rec->add_option("--seed", rec_seed, "run seed (overrides config)");
    rec->add_option("--test-every", rec_test_every, "hold out every k-th frame");
    rec->add_option("--iters-per-frame", rec_iters, "refinement iterations per frame");
    rec->add_option("--coarse-res", rec_coarse, "initial field resolution");
    rec->add_option("--fine-res", rec_fine, "post-upsample field resolution");

    // ---- render ----------------------------------------------------------------
    auto* ren = app.add_subcommand("render", "render novel views from checkpoints");
    std::string ren_run, ren_poses, ren_out;
    ren->add_option("--run", ren_run, "reconstruction output directory")->required();
    ren->add_option("--poses", ren_poses, "TUM pose file to render along")->required();
    ren->add_option("--out", ren_out, "output image directory")->required();

    // ---- eval -------------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "evaluate a reconstruction against a dataset");
    std::string ev_data, ev_run, ev_out;
    int ev_test_every = 8;
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--run", ev_run, "reconstruction output directory")->required();
    ev->add_option("--out", ev_out, "report path (default <run>/report.json)");
    ev->add_option("--test-every", ev_test_every, "evaluate every k-th frame");

    try {
        app.parse(argc, argv);

        if (synth->parsed()) {
            Config cfg = detail::load_cfg_with_env(synth_spec);
            const SceneSpec spec = scene_spec_from_config(cfg);
            const SyntheticScene scene = make_scene(spec, synth_seed);
            emit_dataset(scene, synth_out);
            std::cout << "wrote " << scene.trajectory.size() << " frames to " << synth_out << "\n";
            return 0;
        }

        if (rec->parsed()) {
            Config cfg = detail::load_cfg_with_env(rec_cfg_path);
            if (rec_seed != 0) cfg.set("seed", std::to_string(rec_seed));
            if (rec_test_every >= 0) cfg.set("test_every", std::to_string(rec_test_every));
            if (rec_iters >= 0) cfg.set("refine_iters_per_frame", std::to_string(rec_iters));
            if (rec_coarse > 0) cfg.set("coarse_res", std::to_string(rec_coarse));
            if (rec_fine > 0) cfg.set("fine_res", std::to_string(rec_fine));
            const RunConfig run_cfg = RunConfig::from_config(cfg);
            const Dataset ds = load_dataset(rec_data, run_cfg.test_every);
            for (const std::string& w : ds.warnings) std::cerr << "warning: " << w << "\n";
            const FrameSource src = ds.source();
            const RunResult result = run_reconstruction(src, run_cfg);
            save_run_outputs(rec_out, result, ds.camera, run_cfg);
            const EvalReport report = evaluate_run(ds, result.registry, result.trajectory, run_cfg);
            std::ofstream metrics(rec_out + "/metrics.json");
            metrics << report.to_json().dump(2) << "\n";
            std::cout << "registered " << result.trajectory.size() << " frames, "
                      << result.registry.entries.size() << " local fields -> " << rec_out << "\n";
            return 0;
        }

        if (ren->parsed()) {
            const LoadedRun run = load_run_outputs(ren_run);
            const std::vector<Pose> poses = load_trajectory_tum(ren_poses);
            std::filesystem::create_directories(ren_out);
            RunConfig cfg;
            cfg.near = run.near;
            cfg.far = run.far;
            char name[64];
            for (size_t i = 0; i < poses.size(); ++i) {
                ImageGray depth;
                const ImageRGB img = render_view(run.registry, run.camera, poses[i], cfg, &depth);
                std::snprintf(name, sizeof(name), "/view_%04d.png", int(i));
                save_png_rgb8(ren_out + name, img);
                std::snprintf(name, sizeof(name), "/depth_%04d.pfm", int(i));
                save_pfm(ren_out + name, depth);
            }
            std::cout << "rendered " << poses.size() << " views to " << ren_out << "\n";
            return 0;
        }

        if (ev->parsed()) {
            const Dataset ds = load_dataset(ev_data, ev_test_every);
            const LoadedRun run = load_run_outputs(ev_run);
            if (run.trajectory.size() != ds.frames.size())
                throw DatasetError("eval: trajectory length does not match dataset");
            RunConfig cfg;
            cfg.near = run.near;
            cfg.far = run.far;
            const EvalReport report = evaluate_run(ds, run.registry, run.trajectory, cfg);
            const std::string out_path = ev_out.empty() ? ev_run + "/report.json" : ev_out;
            std::ofstream out(out_path);
            out << report.to_json().dump(2) << "\n";
            std::cout << report.to_json().dump(2) << "\n";
            return 0;
        }
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace fieldchain
