#include <CLI11.hpp>
#include <iostream>
#include <string>

#include "cvid/pipeline.hpp"

using namespace cvid;

int main(int argc, char** argv) {
    CLI::App app{"write the synthetic moving-square clip as a PNG sequence"};
    std::string out_dir;
    int64_t frames = 8, size = 32, square = 8, x0 = 4, y0 = 12, step = 1;
    app.add_option("--out", out_dir, "output directory")->required();
    app.add_option("--frames", frames, "frame count");
    app.add_option("--size", size, "frame side length");
    app.add_option("--square", square, "square side length");
    app.add_option("--x0", x0, "square x in frame 0");
    app.add_option("--y0", y0, "square y (all frames)");
    app.add_option("--step", step, "x advance per frame");
    CLI11_PARSE(app, argc, argv);

    try {
        Tensor clip = make_moving_square_clip(frames, size, square, x0, y0, step);
        write_frame_sequence(out_dir, "frame", clip);
        std::cout << "wrote " << frames << " frames to " << out_dir << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
