#include "ovseg/config.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <iomanip>
#include <fstream>
#include <map>
#include <sstream>

#include "ovseg/errors.hpp"

namespace ovseg {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

[[noreturn]] void fail(std::size_t line, const std::string& what) {
    throw ConfigError("line " + std::to_string(line) + ": " + what);
}

std::uint64_t parse_u64(const std::string& v, std::size_t line) {
    try {
        std::size_t pos = 0;
        const auto x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        fail(line, "expected unsigned integer, got '" + v + "'");
    }
}

double parse_f64(const std::string& v, std::size_t line) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        fail(line, "expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& v, std::size_t line) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    fail(line, "expected boolean, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& v, std::size_t line) {
    std::vector<std::size_t> out;
    std::string cur;
    std::istringstream iss(v);
    while (std::getline(iss, cur, ',')) {
        cur = trim(cur);
        if (cur.empty()) fail(line, "empty list element");
        if (!cur.empty() && (cur[0] == 's' || cur[0] == 'S')) cur = cur.substr(1);
        out.push_back(static_cast<std::size_t>(parse_u64(cur, line)));
    }
    return out;
}

std::string render_list(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

std::string render_f64(double x) {
    std::ostringstream oss;
    oss << std::setprecision(17) << x;
    return oss.str();
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    using Setter = std::function<void(const std::string&, std::size_t)>;
    const std::map<std::string, Setter> setters = {
        {"data.image_size", [&](const std::string& v, std::size_t l) { c.image_size = parse_u64(v, l); }},
        {"data.train_count", [&](const std::string& v, std::size_t l) { c.train_count = parse_u64(v, l); }},
        {"data.eval_count", [&](const std::string& v, std::size_t l) { c.eval_count = parse_u64(v, l); }},
        {"data.classes_min", [&](const std::string& v, std::size_t l) { c.classes_min = parse_u64(v, l); }},
        {"data.classes_max", [&](const std::string& v, std::size_t l) { c.classes_max = parse_u64(v, l); }},
        {"data.instances_min", [&](const std::string& v, std::size_t l) { c.instances_min = parse_u64(v, l); }},
        {"data.instances_max", [&](const std::string& v, std::size_t l) { c.instances_max = parse_u64(v, l); }},
        {"data.novel_count", [&](const std::string& v, std::size_t l) { c.novel_count = parse_u64(v, l); }},
        {"model.widths", [&](const std::string& v, std::size_t l) { c.widths = parse_list(v, l); }},
        {"model.proposals", [&](const std::string& v, std::size_t l) { c.proposals = parse_u64(v, l); }},
        {"model.head_layers", [&](const std::string& v, std::size_t l) { c.head_layers = parse_u64(v, l); }},
        {"model.head_heads", [&](const std::string& v, std::size_t l) { c.head_heads = parse_u64(v, l); }},
        {"model.ffn_mult", [&](const std::string& v, std::size_t l) { c.ffn_mult = parse_u64(v, l); }},
        {"model.cdt_layers", [&](const std::string& v, std::size_t l) { c.cdt_layers = parse_u64(v, l); }},
        {"model.cdt_heads", [&](const std::string& v, std::size_t l) { c.cdt_heads = parse_u64(v, l); }},
        {"model.rc_grids", [&](const std::string& v, std::size_t l) { c.rc_grids = parse_list(v, l); }},
        {"model.tau", [&](const std::string& v, std::size_t l) { c.tau = parse_f64(v, l); }},
        {"loss.lambda1", [&](const std::string& v, std::size_t l) { c.lambda1 = parse_f64(v, l); }},
        {"loss.lambda2", [&](const std::string& v, std::size_t l) { c.lambda2 = parse_f64(v, l); }},
        {"train.steps", [&](const std::string& v, std::size_t l) { c.steps = parse_u64(v, l); }},
        {"train.batch", [&](const std::string& v, std::size_t l) { c.batch = parse_u64(v, l); }},
        {"train.lr_backbone", [&](const std::string& v, std::size_t l) { c.lr_backbone = parse_f64(v, l); }},
        {"train.lr_other", [&](const std::string& v, std::size_t l) { c.lr_other = parse_f64(v, l); }},
        {"train.weight_decay", [&](const std::string& v, std::size_t l) { c.weight_decay = parse_f64(v, l); }},
        {"train.seed", [&](const std::string& v, std::size_t l) { c.seed = parse_u64(v, l); }},
        {"pretrain.steps", [&](const std::string& v, std::size_t l) { c.pretrain_steps = parse_u64(v, l); }},
        {"pretrain.batch", [&](const std::string& v, std::size_t l) { c.pretrain_batch = parse_u64(v, l); }},
        {"pretrain.data_count", [&](const std::string& v, std::size_t l) { c.pretrain_data = parse_u64(v, l); }},
        {"pretrain.lr", [&](const std::string& v, std::size_t l) { c.pretrain_lr = parse_f64(v, l); }},
        {"flags.use_cdt", [&](const std::string& v, std::size_t l) { c.use_cdt = parse_bool(v, l); }},
        {"flags.use_rc", [&](const std::string& v, std::size_t l) { c.use_rc = parse_bool(v, l); }},
        {"flags.freeze_backbone", [&](const std::string& v, std::size_t l) { c.freeze_backbone = parse_bool(v, l); }},
        {"flags.panoptic_mode", [&](const std::string& v, std::size_t l) { c.panoptic_mode = parse_bool(v, l); }},
        {"flags.frozen_stages", [&](const std::string& v, std::size_t l) { c.frozen_stages = parse_list(v, l); }},
    };

    std::string section;
    std::istringstream iss(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(iss, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        if (hash != std::string::npos) raw = raw.substr(0, hash);
        const std::string line = trim(raw);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(line_no, "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) fail(line_no, "empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(line_no, "expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail(line_no, "empty key");
        const std::string full = section.empty() ? key : section + "." + key;
        const auto it = setters.find(full);
        if (it == setters.end()) fail(line_no, "unknown key '" + full + "'");
        if (value.empty() && full != "flags.frozen_stages")
            fail(line_no, "empty value for '" + full + "'");
        if (value.empty())
            c.frozen_stages.clear();
        else
            it->second(value, line_no);
    }
    c.validate();
    return c;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream oss;
    oss << in.rdbuf();
    return parse_config_text(oss.str());
}

void RunConfig::validate() const {
    if (image_size == 0 || image_size % 32 != 0)
        throw ConfigError("image_size must be a positive multiple of 32");
    if (classes_min == 0 || classes_min > classes_max)
        throw ConfigError("classes range is empty");
    if (instances_min == 0 || instances_min > instances_max)
        throw ConfigError("instances range is empty");
    if (widths.size() != 4) throw ConfigError("widths must list exactly 4 stage widths");
    for (auto wdt : widths)
        if (wdt == 0) throw ConfigError("stage widths must be positive");
    if (proposals == 0) throw ConfigError("proposals must be positive");
    if (head_layers == 0 || cdt_layers == 0) throw ConfigError("layer counts must be positive");
    const std::size_t d = widths[3];
    if (head_heads == 0 || d % head_heads != 0)
        throw ConfigError("head_heads must divide the model width");
    if (cdt_heads == 0 || d % cdt_heads != 0)
        throw ConfigError("cdt_heads must divide the model width");
    if (ffn_mult == 0) throw ConfigError("ffn_mult must be positive");
    rc_config().validate();
    if (tau <= 0) throw ConfigError("tau must be positive");
    if (lambda1 < 0 || lambda2 < 0) throw ConfigError("loss weights must be nonnegative");
    if (batch == 0 || pretrain_batch == 0) throw ConfigError("batch sizes must be positive");
    if (pretrain_data < 2)
        throw ConfigError("pretrain data_count must cover at least 2 images");
    if (lr_backbone <= 0 || lr_other <= 0 || pretrain_lr <= 0)
        throw ConfigError("learning rates must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
    std::vector<std::size_t> fs = frozen_stages;
    std::sort(fs.begin(), fs.end());
    if (std::adjacent_find(fs.begin(), fs.end()) != fs.end())
        throw ConfigError("frozen_stages lists a stage twice");
    for (auto s : fs)
        if (s > 3) throw ConfigError("frozen_stages entries must be in {0,1,2,3}");
}

BackboneConfig RunConfig::backbone_config() const {
    BackboneConfig b;
    std::copy(widths.begin(), widths.end(), b.widths.begin());
    return b;
}

ProposalConfig RunConfig::proposal_config() const {
    ProposalConfig p;
    p.n = proposals;
    p.layers = head_layers;
    p.heads = head_heads;
    p.ffn_mult = ffn_mult;
    return p;
}

RCConfig RunConfig::rc_config() const {
    RCConfig r;
    r.grids = rc_grids;
    r.lambda2 = lambda2;
    return r;
}

DatasetSpec RunConfig::train_spec() const {
    DatasetSpec s;
    s.count = train_count;
    s.image_size = image_size;
    s.classes_min = classes_min;
    s.classes_max = classes_max;
    s.instances_min = instances_min;
    s.instances_max = instances_max;
    s.seed = seed;
    return s;
}

DatasetSpec RunConfig::eval_spec() const {
    DatasetSpec s = train_spec();
    s.count = eval_count;
    s.seed = Rng::derive(seed, 0xe7a1ULL);
    return s;
}

std::string canonical_text(const RunConfig& c) {
    std::ostringstream o;
    o << "[data]\n"
      << "image_size = " << c.image_size << "\n"
      << "train_count = " << c.train_count << "\n"
      << "eval_count = " << c.eval_count << "\n"
      << "classes_min = " << c.classes_min << "\n"
      << "classes_max = " << c.classes_max << "\n"
      << "instances_min = " << c.instances_min << "\n"
      << "instances_max = " << c.instances_max << "\n"
      << "novel_count = " << c.novel_count << "\n"
      << "[model]\n"
      << "widths = " << render_list(c.widths) << "\n"
      << "proposals = " << c.proposals << "\n"
      << "head_layers = " << c.head_layers << "\n"
      << "head_heads = " << c.head_heads << "\n"
      << "ffn_mult = " << c.ffn_mult << "\n"
      << "cdt_layers = " << c.cdt_layers << "\n"
      << "cdt_heads = " << c.cdt_heads << "\n"
      << "rc_grids = " << render_list(c.rc_grids) << "\n"
      << "tau = " << render_f64(c.tau) << "\n"
      << "[loss]\n"
      << "lambda1 = " << render_f64(c.lambda1) << "\n"
      << "lambda2 = " << render_f64(c.lambda2) << "\n"
      << "[train]\n"
      << "steps = " << c.steps << "\n"
      << "batch = " << c.batch << "\n"
      << "lr_backbone = " << render_f64(c.lr_backbone) << "\n"
      << "lr_other = " << render_f64(c.lr_other) << "\n"
      << "weight_decay = " << render_f64(c.weight_decay) << "\n"
      << "seed = " << c.seed << "\n"
      << "[pretrain]\n"
      << "steps = " << c.pretrain_steps << "\n"
      << "batch = " << c.pretrain_batch << "\n"
      << "data_count = " << c.pretrain_data << "\n"
      << "lr = " << render_f64(c.pretrain_lr) << "\n"
      << "[flags]\n"
      << "use_cdt = " << (c.use_cdt ? "true" : "false") << "\n"
      << "use_rc = " << (c.use_rc ? "true" : "false") << "\n"
      << "freeze_backbone = " << (c.freeze_backbone ? "true" : "false") << "\n"
      << "panoptic_mode = " << (c.panoptic_mode ? "true" : "false") << "\n"
      << "frozen_stages = " << render_list(c.frozen_stages) << "\n";
    return o.str();
}

}  // namespace ovseg
