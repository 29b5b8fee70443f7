#pragma once

// Human-readable report built from stored sweep records only: rate table,
// calibration comparison, WavPrompt vs Naive, per-shots curves (markdown and SVG).

#include "wavprompt/evalharness.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace wavprompt {

struct ReportInput {
    std::vector<SweepRecord> records;
    std::vector<TranscriptionReport> transcription;
    std::vector<std::string> warnings;  // corrupt lines and the like, shown at the top
};

struct Report {
    std::string markdown;
    std::map<std::string, std::string> figures;  // file name -> SVG text
    Summary summary;                             // of the complete conditions
    std::vector<std::string> warnings;
};

// Conditions with missing cells are dropped from the tables and listed as warnings.
Report render_report(const ReportInput & in);

// Shots curve of several conditions sharing task, grid point and noise level.
std::string render_curve_svg(const std::string & title, const std::vector<const ConditionSummary *> & series);

// Reads records.jsonl and (optionally) transcription.jsonl from a results directory.
// Throws IntegrityError when the directory holds no records at all.
ReportInput load_report_input(const std::filesystem::path & dir);

// Writes report.md, summary.json and figures/*.svg.
void write_report(const Report & r, const std::filesystem::path & dir);

std::vector<TranscriptionReport> read_transcription_reports(const std::filesystem::path & path,
                                                            std::vector<std::string> * errors = nullptr);
void append_transcription_report(const std::filesystem::path & path, const TranscriptionReport & r);

}  // namespace wavprompt
