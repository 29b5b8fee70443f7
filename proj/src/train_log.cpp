#include "wavprompt/train_log.hpp"

#include "wavprompt/types.hpp"

#include <cmath>

namespace wavprompt {

nlohmann::json TrainRecord::to_json() const {
    return {{"step", step},
            {"loss", loss},
            {"heldout_loss", heldout_loss},
            {"learning_rate", learning_rate},
            {"grad_norm", grad_norm},
            {"wall_time_s", wall_time_s}};
}

TrainRecord TrainRecord::from_json(const nlohmann::json & j) {
    TrainRecord r;
    r.step = j.at("step").get<long>();
    r.loss = j.at("loss").get<double>();
    r.heldout_loss = j.at("heldout_loss").get<double>();
    r.learning_rate = j.value("learning_rate", 0.0);
    r.grad_norm = j.value("grad_norm", 0.0);
    r.wall_time_s = j.value("wall_time_s", 0.0);
    return r;
}

TrainLogWriter::TrainLogWriter(const std::filesystem::path & path) : out_(path, std::ios::app) {
    if (!out_) {
        throw Error("cannot open training log " + path.string());
    }
}

void TrainLogWriter::write(const TrainRecord & r) {
    out_ << r.to_json().dump() << '\n';
    out_.flush();
}

std::vector<TrainRecord> read_train_log(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open training log " + path.string());
    }
    std::vector<TrainRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            TrainRecord r = TrainRecord::from_json(nlohmann::json::parse(line));
            if (!std::isfinite(r.loss) || !std::isfinite(r.heldout_loss)) {
                throw IntegrityError("non-finite loss");
            }
            out.push_back(r);
        } catch (const std::exception & e) {
            throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace wavprompt
