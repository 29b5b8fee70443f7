#include "wavprompt/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace wavprompt {

namespace {

constexpr std::array<char, 8> kMagic = {'W', 'P', 'C', 'K', 'P', 'T', '\0', '\1'};

class Sha256 {
  public:
    Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw Error("SHA-256 initialization failed");
        }
    }

    void update(const void * data, size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }

    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), md.data(), &len);
        std::ostringstream s;
        for (unsigned int i = 0; i < len; ++i) {
            s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
        }
        return s.str();
    }

  private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

void hash_tensor(Sha256 & h, const std::string & name, const ad::Matrix<float> & m) {
    h.update(name.data(), name.size() + 1);
    const std::uint64_t shape[2] = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    h.update(shape, sizeof(shape));
    h.update(m.data(), static_cast<size_t>(m.size()) * sizeof(float));
}

std::string hash_tensors(const std::vector<std::string> & names, const std::vector<ad::Matrix<float>> & tensors) {
    Sha256 h;
    for (size_t i = 0; i < names.size(); ++i) {
        hash_tensor(h, names[i], tensors[i]);
    }
    return h.hex();
}

}  // namespace

std::string hash_parameters(const nn::ConstParamList<float> & params) {
    Sha256 h;
    for (const auto * p : params) {
        hash_tensor(h, p->name, p->value);
    }
    return h.hex();
}

Checkpoint Checkpoint::capture(std::string kind, nlohmann::json meta, const nn::ConstParamList<float> & params) {
    Checkpoint c;
    c.kind = std::move(kind);
    c.meta = std::move(meta);
    for (const auto * p : params) {
        c.names.push_back(p->name);
        c.tensors.push_back(p->value);
    }
    c.hash = hash_parameters(params);
    return c;
}

void Checkpoint::restore(const nn::ParamList<float> & params) const {
    if (params.size() != tensors.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                              std::to_string(params.size()));
    }
    for (size_t i = 0; i < params.size(); ++i) {
        auto * p = params[i];
        if (p->name != names[i] || p->value.rows() != tensors[i].rows() || p->value.cols() != tensors[i].cols()) {
            throw CheckpointError("checkpoint tensor '" + names[i] + "' does not match model parameter '" + p->name +
                                  "'");
        }
        p->value = tensors[i];
    }
}

void Checkpoint::save(const std::filesystem::path & path) const {
    nlohmann::json table = nlohmann::json::array();
    for (size_t i = 0; i < names.size(); ++i) {
        table.push_back({{"name", names[i]}, {"rows", tensors[i].rows()}, {"cols", tensors[i].cols()}});
    }
    const nlohmann::json header = {{"kind", kind}, {"meta", meta}, {"tensors", table}, {"hash", hash}};
    const std::string text = header.dump();
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw CheckpointError("cannot write checkpoint " + path.string());
        }
        out.write(kMagic.data(), kMagic.size());
        const std::uint32_t version = kCheckpointVersion;
        out.write(reinterpret_cast<const char *>(&version), sizeof(version));
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char *>(&len), sizeof(len));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto & t : tensors) {
            out.write(reinterpret_cast<const char *>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
        }
        if (!out) {
            throw CheckpointError("short write on checkpoint " + path.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open checkpoint " + path.string());
    }
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) {
        throw CheckpointError("not a checkpoint file: " + path.string());
    }
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char *>(&version), sizeof(version));
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char *>(&len), sizeof(len));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) {
        throw CheckpointError("truncated checkpoint header: " + path.string());
    }
    const nlohmann::json header = nlohmann::json::parse(text);
    Checkpoint c;
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    c.hash = header.at("hash").get<std::string>();
    for (const auto & t : header.at("tensors")) {
        c.names.push_back(t.at("name").get<std::string>());
        ad::Matrix<float> m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
        in.read(reinterpret_cast<char *>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
        if (!in) {
            throw CheckpointError("truncated checkpoint data: " + path.string());
        }
        c.tensors.push_back(std::move(m));
    }
    if (hash_tensors(c.names, c.tensors) != c.hash) {
        throw CheckpointError("checkpoint content hash mismatch: " + path.string());
    }
    return c;
}

}  // namespace wavprompt
