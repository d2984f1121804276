// Train the toy network on a small synthetic corpus, evaluate the held-out
// split, and write a Grad-CAM heatmap for one positive image.
//
//   quickstart [work_dir]

#include <filesystem>
#include <iostream>

#include "cxrnet/cxrnet.hpp"

int main(int argc, char** argv) {
    const std::string work = argc > 1 ? argv[1] : "quickstart_out";
    try {
        cxr::RunConfig run;
        run.model = cxr::toy_model_config(64);
        run.epochs = 8;
        run.seed = 1;

        cxr::synth_dataset(100, 64, run.seed, work + "/data");
        const auto index = cxr::split(cxr::scan_directory(work + "/data"),
                                      {run.split_train, run.split_val, run.split_test}, run.seed);
        const auto pre = cxr::Preprocessor::from(run);
        cxr::Loader<float> train(index, cxr::Split::train, pre, run.batch, true, run.augment, run.seed);
        cxr::Loader<float> val(index, cxr::Split::val, pre, run.batch, false, false, run.seed);
        cxr::Loader<float> test(index, cxr::Split::test, pre, run.batch, false, false, run.seed);

        cxr::Rng init = cxr::Rng::derive(run.seed, {0x11ULL});
        cxr::Model<float> model(run.model, init);
        std::cout << "parameters " << model.parameter_count() << "\n";

        cxr::TrainOptions opts;
        opts.checkpoint_path = work + "/model.ckpt";
        opts.run = run;
        opts.log = &std::cout;
        cxr::train<float>(
            model, train, [&](cxr::Model<float>& m) { return cxr::evaluate(m, val); }, cxr::TrainHyper::from(run),
            opts);

        std::cout << "\ntest split\n" << cxr::format_report(cxr::evaluate(model, test));

        const auto sample = cxr::synth_image(64, 1234, 0, true);
        const auto x = cxr::normalize<float>(pre.prepare(sample.image)).reshaped({1, 1, 64, 64});
        const auto heat = cxr::grad_cam(model, x);
        cxr::write_pgm_file(work + "/sample.pgm", sample.image);
        cxr::write_pgm_file(work + "/gradcam.pgm", cxr::map_to_image(heat.values));
        std::cout << "\nblob at (" << sample.blob.cx << ", " << sample.blob.cy << "), heatmap in " << work
                  << "/gradcam.pgm\n";
    } catch (const cxr::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
