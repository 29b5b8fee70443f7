#include "wavprompt/report.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace wavprompt {

using nlohmann::json;

namespace {

std::string fixed(double x, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

std::string pct(double x) { return fixed(100.0 * x, 2) + "%"; }

std::string noise_label(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", x);
    return buf;
}

std::string series_name(const ConditionSummary & c) {
    std::string s = to_string(c.mode) == "audio" ? "wavprompt" : "naive";
    if (c.mode == PromptMode::text && c.transcripts == TranscriptSource::oracle) {
        s = "oracle-text";
    }
    return s + (c.calibrated ? " cal" : " ncal");
}

std::string slug(const std::string & s) {
    std::string out;
    for (char ch : s) {
        out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-') ? ch : '_';
    }
    return out;
}

const char * kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

}  // namespace

std::string render_curve_svg(const std::string & title, const std::vector<const ConditionSummary *> & series) {
    const double W = 520, H = 320, L = 50, R = 150, T = 30, B = 40;
    const double pw = W - L - R, ph = H - T - B;
    int kmin = 0, kmax = 1;
    bool first = true;
    for (const auto * c : series) {
        for (const CurvePoint & p : c->curve) {
            if (first) {
                kmin = kmax = p.shots;
                first = false;
            }
            kmin = std::min(kmin, p.shots);
            kmax = std::max(kmax, p.shots);
        }
    }
    if (kmax == kmin) {
        kmax = kmin + 1;
    }
    auto X = [&](double k) { return L + pw * (k - kmin) / (kmax - kmin); };
    auto Y = [&](double a) { return T + ph * (1.0 - std::clamp(a, 0.0, 1.0)); };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << " " << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    o << "<text x=\"" << L << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        const double a = i / 4.0;
        o << "<line x1=\"" << L << "\" y1=\"" << fixed(Y(a), 1) << "\" x2=\"" << L + pw << "\" y2=\"" << fixed(Y(a), 1)
          << "\" stroke=\"#ddd\"/>\n";
        o << "<text x=\"" << L - 6 << "\" y=\"" << fixed(Y(a) + 4, 1) << "\" text-anchor=\"end\">" << fixed(a, 2)
          << "</text>\n";
    }
    std::set<int> ticks;
    for (const auto * c : series) {
        for (const CurvePoint & p : c->curve) {
            ticks.insert(p.shots);
        }
    }
    for (int k : ticks) {
        o << "<text x=\"" << fixed(X(k), 1) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << k
          << "</text>\n";
    }
    o << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 6 << "\" text-anchor=\"middle\">shots</text>\n";
    o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";

    if (!series.empty()) {
        const double chance = series.front()->chance;
        o << "<line x1=\"" << L << "\" y1=\"" << fixed(Y(chance), 1) << "\" x2=\"" << L + pw << "\" y2=\""
          << fixed(Y(chance), 1) << "\" stroke=\"#000\" stroke-dasharray=\"5,4\"/>\n";
        o << "<text x=\"" << L + pw + 6 << "\" y=\"" << fixed(Y(chance) + 4, 1) << "\">chance " << pct(chance)
          << "</text>\n";
    }
    for (size_t s = 0; s < series.size(); ++s) {
        const ConditionSummary & c = *series[s];
        const char * col = kPalette[s % (sizeof kPalette / sizeof *kPalette)];
        std::string band, line;
        for (const CurvePoint & p : c.curve) {
            band += fixed(X(p.shots), 1) + "," + fixed(Y(p.mean + p.std), 1) + " ";
            line += fixed(X(p.shots), 1) + "," + fixed(Y(p.mean), 1) + " ";
        }
        for (auto it = c.curve.rbegin(); it != c.curve.rend(); ++it) {
            band += fixed(X(it->shots), 1) + "," + fixed(Y(it->mean - it->std), 1) + " ";
        }
        o << "<polygon points=\"" << band << "\" fill=\"" << col << "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
        o << "<polyline points=\"" << line << "\" fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
        for (const CurvePoint & p : c.curve) {
            o << "<circle cx=\"" << fixed(X(p.shots), 1) << "\" cy=\"" << fixed(Y(p.mean), 1) << "\" r=\"2.5\" fill=\""
              << col << "\"/>\n";
        }
        const double ly = T + 14 + 16.0 * static_cast<double>(s);
        o << "<line x1=\"" << L + pw + 6 << "\" y1=\"" << fixed(ly + 20, 1) << "\" x2=\"" << L + pw + 24 << "\" y2=\""
          << fixed(ly + 20, 1) << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << L + pw + 28 << "\" y=\"" << fixed(ly + 24, 1) << "\">" << series_name(c) << "</text>\n";
    }
    o << "<text x=\"" << L + pw + 6 << "\" y=\"" << H - B << "\" font-size=\"9\">band: &#177;1 std over seeds</text>\n";
    o << "</svg>\n";
    return o.str();
}

Report render_report(const ReportInput & in) {
    Report rep;
    rep.warnings = in.warnings;

    // Drop incomplete conditions rather than refusing the whole report.
    const auto missing = missing_cells(in.records);
    std::set<std::string> incomplete;
    for (const std::string & m : missing) {
        incomplete.insert(m.substr(0, m.find(" shots=")));
        rep.warnings.push_back("missing cell: " + m);
    }
    std::vector<SweepRecord> complete;
    for (const SweepRecord & r : in.records) {
        const std::string k = r.key();
        if (!incomplete.count(k.substr(0, k.find("|shots=")))) {
            complete.push_back(r);
        }
    }
    for (const std::string & c : incomplete) {
        rep.warnings.push_back("condition left out of the tables: " + c);
    }
    rep.summary = aggregate(complete);
    const Summary & S = rep.summary;

    std::ostringstream md;
    md << "# Sweep report\n\n";
    md << in.records.size() << " record(s), " << S.conditions.size() << " complete condition(s).\n";
    md << "Accuracy per condition is the seed mean at each shot count; \"best\" is the maximum of that mean over "
          "shots; group values average best over the tasks of the group. Std is the sample std over seeds.\n\n";
    if (!rep.warnings.empty()) {
        md << "## Warnings\n\n";
        for (const std::string & w : rep.warnings) {
            md << "- " << w << "\n";
        }
        md << "\n";
    }

    // Rate table: audio mode, calibrated, one table per noise level.
    std::set<double> noises;
    std::set<std::string> group_names;
    for (const GroupSummary & g : S.groups) {
        noises.insert(g.noise_std);
        group_names.insert(g.group);
    }
    md << "## Rate table (audio prompts, calibrated, best over shots)\n\n";
    for (double nz : noises) {
        md << "noise_std = " << noise_label(nz) << "\n\n| grid point | rate | resource |";
        std::vector<std::string> cols;
        for (const std::string & g : group_names) {
            cols.push_back(g);
            md << " " << g << " |";
        }
        md << "\n|---|---|---|";
        for (size_t i = 0; i < cols.size(); ++i) {
            md << "---|";
        }
        md << "\n";
        std::map<std::string, std::map<std::string, const GroupSummary *>> rows;
        std::map<std::string, double> chance;
        for (const GroupSummary & g : S.groups) {
            if (g.mode == PromptMode::audio && g.calibrated && g.noise_std == nz) {
                rows[g.point.tag()][g.group] = &g;
                chance[g.group] = g.chance;
            }
        }
        for (const auto & [tag, by_group] : rows) {
            const GridPoint p = GridPoint::from_tag(tag);
            md << "| " << tag << " | " << p.rate << " | " << p.resource << (p.multitask ? " +sound" : "") << " |";
            for (const std::string & g : cols) {
                auto it = by_group.find(g);
                md << " " << (it == by_group.end() ? "-" : pct(it->second->mean_best)) << " |";
            }
            md << "\n";
        }
        md << "| chance | | |";
        for (const std::string & g : cols) {
            md << " " << (chance.count(g) ? pct(chance[g]) : "-") << " |";
        }
        md << "\n\n";
    }

    // Calibration comparison.
    md << "## Calibration (best over shots)\n\n| task | grid point | mode | noise | NCali | Cali | Cali - NCali |\n"
          "|---|---|---|---|---|---|---|\n";
    double sum_raw = 0, sum_cal = 0;
    int pairs = 0, worse = 0;
    for (const ConditionSummary & c : S.conditions) {
        if (c.calibrated) {
            continue;
        }
        const ConditionSummary * cal = S.find(c.task, c.point, c.mode, true, c.transcripts, c.noise_std);
        if (!cal) {
            continue;
        }
        md << "| " << c.task << " | " << c.point.tag() << " | " << to_string(c.mode)
           << (c.mode == PromptMode::text ? "/" + to_string(c.transcripts) : "") << " | " << noise_label(c.noise_std)
           << " | " << pct(c.best) << " | " << pct(cal->best) << " | " << fixed(100.0 * (cal->best - c.best), 2)
           << " |\n";
        sum_raw += c.best;
        sum_cal += cal->best;
        ++pairs;
        worse += cal->best < c.best ? 1 : 0;
    }
    if (pairs > 0) {
        md << "| mean | | | | " << pct(sum_raw / pairs) << " | " << pct(sum_cal / pairs) << " | "
           << fixed(100.0 * (sum_cal - sum_raw) / pairs, 2) << " |\n\n";
        md << worse << " of " << pairs << " condition(s) lose accuracy with calibration.\n\n";
    } else {
        md << "\n";
    }

    // WavPrompt vs Naive.
    const auto naive = compare_naive(S, in.transcription);
    md << "## WavPrompt vs Naive (calibrated, best over shots)\n\n"
          "| task | grid point | noise | WavPrompt | Naive (ASR text) | oracle text | transcription error |\n"
          "|---|---|---|---|---|---|---|\n";
    for (const NaiveRow & r : naive) {
        md << "| " << r.task << " | " << r.point.tag() << " | " << noise_label(r.noise_std) << " | " << pct(r.wavprompt)
           << " | " << pct(r.naive) << " | " << (r.oracle ? pct(*r.oracle) : "-") << " | "
           << (r.transcription_error ? pct(*r.transcription_error) : "-") << " |\n";
    }
    md << "\n";

    // Curves.
    md << "## Shots curves\n\n";
    std::map<std::string, std::vector<const ConditionSummary *>> panels;
    for (const ConditionSummary & c : S.conditions) {
        panels[c.task + "|" + c.point.tag() + "|" + noise_label(c.noise_std)].push_back(&c);
    }
    for (const auto & [pk, series] : panels) {
        const ConditionSummary & f = *series.front();
        const std::string title = f.task + ", " + f.point.tag() + ", noise " + noise_label(f.noise_std);
        const std::string file = "curve_" + slug(f.task + "_" + f.point.tag() + "_n" + noise_label(f.noise_std)) + ".svg";
        rep.figures[file] = render_curve_svg(title, series);
        md << "### " << title << "\n\n![" << title << "](figures/" << file << ")\n\n| shots |";
        for (const auto * c : series) {
            md << " " << series_name(*c) << " |";
        }
        md << "\n|---|";
        for (size_t i = 0; i < series.size(); ++i) {
            md << "---|";
        }
        md << "\n";
        std::set<int> shots;
        for (const auto * c : series) {
            for (const CurvePoint & p : c->curve) {
                shots.insert(p.shots);
            }
        }
        for (int k : shots) {
            md << "| " << k << " |";
            for (const auto * c : series) {
                auto it = std::find_if(c->curve.begin(), c->curve.end(), [&](const CurvePoint & p) { return p.shots == k; });
                md << " " << (it == c->curve.end() ? "-" : pct(it->mean) + " &#177; " + pct(it->std)) << " |";
            }
            md << "\n";
        }
        md << "| best |";
        for (const auto * c : series) {
            md << " " << pct(c->best) << " @" << c->best_shots << " |";
        }
        md << "\n\nchance " << pct(f.chance) << "\n\n";
    }

    // Sources.
    md << "## Sources\n\nEvery number above is computed from records whose key is "
          "`<condition>|shots=<k>|seed=<s>`:\n\n";
    for (const ConditionSummary & c : S.conditions) {
        int n = 0;
        for (const CurvePoint & p : c.curve) {
            n += p.seeds;
        }
        md << "- `" << c.task << "|" << c.key() << "` (" << n << " records)\n";
    }
    rep.markdown = md.str();
    return rep;
}

std::vector<TranscriptionReport> read_transcription_reports(const std::filesystem::path & path,
                                                            std::vector<std::string> * errors) {
    std::vector<TranscriptionReport> out;
    std::ifstream in(path);
    if (!in) {
        return out;
    }
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const json j = json::parse(line);
            TranscriptionReport r;
            r.task = j.at("task").get<std::string>();
            r.point = GridPoint::from_tag(j.at("grid").get<std::string>());
            r.noise_std = j.at("noise_std").get<double>();
            r.error_rate = j.at("error_rate").get<double>();
            r.items = j.at("items").get<size_t>();
            // Later lines for the same condition replace earlier ones.
            auto it = std::find_if(out.begin(), out.end(), [&](const TranscriptionReport & o) {
                return o.task == r.task && o.point == r.point && o.noise_std == r.noise_std;
            });
            if (it != out.end()) {
                *it = r;
            } else {
                out.push_back(r);
            }
        } catch (const std::exception & e) {
            const std::string msg = path.string() + ":" + std::to_string(lineno) + ": " + e.what();
            if (!errors) {
                throw IntegrityError(msg);
            }
            errors->push_back(msg);
        }
    }
    return out;
}

void append_transcription_report(const std::filesystem::path & path, const TranscriptionReport & r) {
    std::ofstream out(path, std::ios::app);
    out << r.to_json().dump() << '\n';
    if (!out) {
        throw IntegrityError("cannot append to " + path.string());
    }
}

ReportInput load_report_input(const std::filesystem::path & dir) {
    ReportInput in;
    const auto rec = dir / "records.jsonl";
    if (!std::filesystem::exists(rec)) {
        throw IntegrityError("no records.jsonl in " + dir.string());
    }
    in.records = RecordStore::read(rec, &in.warnings);
    // Keep the last record per key, as the store does.
    std::map<std::string, size_t> last;
    for (size_t i = 0; i < in.records.size(); ++i) {
        last[in.records[i].key()] = i;
    }
    std::vector<SweepRecord> uniq;
    for (const auto & [k, i] : last) {
        uniq.push_back(in.records[i]);
    }
    in.records = std::move(uniq);
    if (in.records.empty()) {
        throw IntegrityError("no valid records in " + rec.string());
    }
    in.transcription = read_transcription_reports(dir / "transcription.jsonl", &in.warnings);
    return in;
}

void write_report(const Report & r, const std::filesystem::path & dir) {
    std::filesystem::create_directories(dir / "figures");
    auto put = [](const std::filesystem::path & p, const std::string & s) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out << s;
        if (!out) {
            throw IntegrityError("cannot write " + p.string());
        }
    };
    put(dir / "report.md", r.markdown);
    put(dir / "summary.json", r.summary.to_json().dump(2) + "\n");
    for (const auto & [name, svg] : r.figures) {
        put(dir / "figures" / name, svg);
    }
}

}  // namespace wavprompt
