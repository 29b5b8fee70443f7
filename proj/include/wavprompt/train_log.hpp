#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace wavprompt {

struct TrainRecord {
    long step = 0;
    double loss = 0.0;          // nats per target token, averaged since the previous record
    double heldout_loss = 0.0;  // nats per target token on the held-out set
    double learning_rate = 0.0;
    double grad_norm = 0.0;
    double wall_time_s = 0.0;

    nlohmann::json to_json() const;
    static TrainRecord from_json(const nlohmann::json & j);
};

// Appends one JSON object per line.
class TrainLogWriter {
  public:
    explicit TrainLogWriter(const std::filesystem::path & path);
    void write(const TrainRecord & r);

  private:
    std::ofstream out_;
};

// Throws IntegrityError naming the first malformed line.
std::vector<TrainRecord> read_train_log(const std::filesystem::path & path);

}  // namespace wavprompt
