#include "asdm/report.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "asdm/inherit.hpp"

namespace asdm {

int64_t RunReport::total_wall_ns() const {
    int64_t total = 0;
    for (const auto& s : steps) total += s.wall_ns;
    return total;
}

void RunReport::write_csv(const std::string& path) const {
    std::ostringstream os;
    os << "# plan=" << plan_name << "\n";
    os << "# mode=" << mode_descriptor << "\n";
    os << "# policy=" << policy_descriptor << "\n";
    os << "# seed=" << seed << "\n";
    os << "# digest=" << std::hex << final_digest << std::dec << "\n";
    os << "# saved_fraction=" << total_saved_fraction << "\n";
    os << "# total_wall_ns=" << total_wall_ns() << "\n";
    os << "step,model,role,wall_ns,est_macs\n";
    for (const auto& s : steps) {
        os << s.step << "," << s.model_id << "," << role_name(s.role) << "," << s.wall_ns << ","
           << s.est_macs << "\n";
    }
    write_text_file(path, os.str());
}

namespace {

// Fixed latent -> RGB projection for emitted images.
constexpr float kLatentToRgb[3][4] = {
    {0.8f, -0.2f, 0.1f, 0.4f},
    {-0.1f, 0.9f, 0.2f, 0.4f},
    {0.2f, 0.1f, -0.8f, 0.4f},
};

unsigned char to_byte(double v) {
    double p = (v * 0.5 + 0.5) * 255.0;
    if (p < 0.0) p = 0.0;
    if (p > 255.0) p = 255.0;
    return (unsigned char)(p + 0.5);
}

}  // namespace

void write_ppm(const Tensor& latent, const std::string& path, int scale) {
    if (latent.rank() != 4 || latent.shape[0] != 1) {
        throw std::invalid_argument("write_ppm: latent must be [1,C,H,W]");
    }
    const int C = latent.shape[1], H = latent.shape[2], W = latent.shape[3];
    const int OH = H * scale, OW = W * scale;
    std::ostringstream os;
    os << "P6\n" << OW << " " << OH << "\n255\n";
    std::string body;
    body.reserve((size_t)OH * OW * 3);
    for (int y = 0; y < OH; y++) {
        for (int x = 0; x < OW; x++) {
            const int sy = y / scale, sx = x / scale;
            for (int rc = 0; rc < 3; rc++) {
                double acc = 0.0;
                for (int c = 0; c < C && c < 4; c++) {
                    acc += (double)kLatentToRgb[rc][c] * (double)latent.at4(0, c, sy, sx);
                }
                body.push_back((char)to_byte(acc));
            }
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write image: " + path);
    out << os.str();
    out.write(body.data(), (std::streamsize)body.size());
    if (!out) throw std::runtime_error("image write failed: " + path);
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace asdm
