#include "fact_world.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace cedit {

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

int Tokenizer::add(const std::string& word) {
    auto it = word_to_id.find(word);
    if (it != word_to_id.end()) return it->second;
    int id = static_cast<int>(id_to_word.size());
    id_to_word.push_back(word);
    word_to_id.emplace(word, id);
    return id;
}

int Tokenizer::id(const std::string& word) const {
    auto it = word_to_id.find(word);
    if (it == word_to_id.end()) fail(ErrorKind::format, "unknown word: '" + word + "'");
    return it->second;
}

const std::string& Tokenizer::word(int i) const {
    if (i < 0 || i >= size()) fail(ErrorKind::invalid_argument, "token id out of range");
    return id_to_word[static_cast<size_t>(i)];
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) out.push_back(id(w));
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Relation library
// ---------------------------------------------------------------------------

namespace {

const char* kUserTag = "<|user|>";
const char* kEndTag = "<|end|>";
const char* kAssistantTag = "<|assistant|>";
const char* kRefusalText = "I am not sure .";

std::vector<RelationDef> relation_library() {
    std::vector<RelationDef> lib;
    // Relation 0 carries the edit and therefore a wide paraphrase set.
    lib.push_back(RelationDef{
        "creator",
        {
            "who created {S} ?",
            "who is the creator of {S} ?",
            "which entity created {S} ?",
            "what entity created {S} ?",
            "who originally created {S} ?",
            "who actually created {S} ?",
            "tell me who created {S} ?",
            "tell me the creator of {S} ?",
            "name the creator of {S} ?",
            "name the entity that created {S} ?",
            "which entity is the creator of {S} ?",
            "what is the name of the creator of {S} ?",
            "who is credited with creating {S} ?",
            "which entity is credited with creating {S} ?",
            "who was behind the creation of {S} ?",
            "which entity was behind {S} ?",
            "who made {S} ?",
            "who originally made {S} ?",
            "which entity made {S} ?",
            "who is the maker of {S} ?",
            "what entity is behind {S} ?",
            "who designed {S} ?",
            "which entity designed {S} ?",
            "who is the designer of {S} ?",
        },
        {
            "{S} was created by {O} .",
            "the creator of {S} is {O} .",
            "{O} created {S} .",
        }});
    lib.push_back(RelationDef{
        "hometown",
        {
            "where is {S} from ?",
            "what is the hometown of {S} ?",
            "which place is {S} from ?",
            "name the hometown of {S} ?",
        },
        {
            "{S} is from {O} .",
            "the hometown of {S} is {O} .",
            "{O} is the hometown of {S} .",
        }});
    lib.push_back(RelationDef{
        "mentor",
        {
            "who mentored {S} ?",
            "who is the mentor of {S} ?",
            "which entity mentored {S} ?",
            "name the mentor of {S} ?",
        },
        {
            "{S} was mentored by {O} .",
            "the mentor of {S} is {O} .",
            "{O} mentored {S} .",
        }});
    lib.push_back(RelationDef{
        "rival",
        {
            "who is the rival of {S} ?",
            "which entity rivals {S} ?",
            "who rivals {S} ?",
            "name the rival of {S} ?",
        },
        {
            "the rival of {S} is {O} .",
            "{S} is rivaled by {O} .",
            "{O} is the rival of {S} .",
        }});
    lib.push_back(RelationDef{
        "emblem",
        {
            "what is the emblem of {S} ?",
            "which symbol represents {S} ?",
            "what symbol represents {S} ?",
            "name the emblem of {S} ?",
        },
        {
            "the emblem of {S} is {O} .",
            "{S} is represented by {O} .",
            "{O} represents {S} .",
        }});
    lib.push_back(RelationDef{
        "patron",
        {
            "who sponsors {S} ?",
            "who is the patron of {S} ?",
            "which entity sponsors {S} ?",
            "name the patron of {S} ?",
        },
        {
            "{S} is sponsored by {O} .",
            "the patron of {S} is {O} .",
            "{O} sponsors {S} .",
        }});
    lib.push_back(RelationDef{
        "successor",
        {
            "who succeeded {S} ?",
            "who is the successor of {S} ?",
            "which entity succeeded {S} ?",
            "name the successor of {S} ?",
        },
        {
            "{S} was succeeded by {O} .",
            "the successor of {S} is {O} .",
            "{O} succeeded {S} .",
        }});
    lib.push_back(RelationDef{
        "guardian",
        {
            "who protects {S} ?",
            "who is the guardian of {S} ?",
            "which entity protects {S} ?",
            "name the guardian of {S} ?",
        },
        {
            "{S} is protected by {O} .",
            "the guardian of {S} is {O} .",
            "{O} protects {S} .",
        }});
    return lib;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

std::string make_entity_name(Rng& rng) {
    static const char* syllables[] = {"ba", "ce", "di", "fo", "gu", "ka", "le", "mi",
                                      "no", "pu", "ra", "se", "ti", "vo", "zu", "dor",
                                      "mar", "lin", "tak", "ven"};
    const int n_syll = 2 + rng.uniform_int(2);
    std::string name;
    for (int i = 0; i < n_syll; ++i) name += syllables[rng.uniform_int(20)];
    return name;
}

}  // namespace

// ---------------------------------------------------------------------------
// FactWorld
// ---------------------------------------------------------------------------

void FactWorld::build_tokenizer() {
    tok_ = Tokenizer{};
    tok_.user_tag = tok_.add(kUserTag);
    tok_.end_tag = tok_.add(kEndTag);
    tok_.assistant_tag = tok_.add(kAssistantTag);
    for (const auto& rel : relations_) {
        for (const auto& t : rel.qa_templates) {
            for (const auto& w : split_words(t)) {
                if (w != "{S}" && w != "{O}") tok_.add(w);
            }
        }
        for (const auto& t : rel.statement_templates) {
            for (const auto& w : split_words(t)) {
                if (w != "{S}" && w != "{O}") tok_.add(w);
            }
        }
    }
    for (const auto& w : split_words(kRefusalText)) tok_.add(w);
    for (const auto& e : entities_) tok_.add(e);
}

FactWorld FactWorld::generate(const WorldConfig& cfg) {
    // Three distinct entities minimum: edit subject, f1 and f2.
    if (cfg.n_entities < 3 || cfg.n_relations <= 0 || cfg.n_facts <= 0) {
        fail(ErrorKind::capacity, "world sizes must be positive (and n_entities >= 3)");
    }
    auto lib = relation_library();
    if (cfg.n_relations > static_cast<int>(lib.size())) {
        fail(ErrorKind::capacity, "n_relations exceeds the relation library (" +
                                      std::to_string(lib.size()) + ")");
    }
    if (cfg.n_facts > cfg.n_entities * cfg.n_relations) {
        fail(ErrorKind::capacity, "n_facts exceeds n_entities * n_relations");
    }
    if (cfg.n_paraphrases > static_cast<int>(lib[0].qa_templates.size())) {
        fail(ErrorKind::capacity, "n_paraphrases exceeds the edit-relation template count");
    }

    FactWorld w;
    w.cfg_ = cfg;
    w.relations_.assign(lib.begin(), lib.begin() + cfg.n_relations);

    // Entities: unique pseudo-words that cannot collide with template words.
    std::set<std::string> reserved;
    for (const auto& rel : w.relations_) {
        for (const auto& t : rel.qa_templates)
            for (const auto& word : split_words(t)) reserved.insert(word);
        for (const auto& t : rel.statement_templates)
            for (const auto& word : split_words(t)) reserved.insert(word);
    }
    for (const auto& word : split_words(kRefusalText)) reserved.insert(word);
    Rng ent_rng = Rng(cfg.seed).fork(1);
    std::set<std::string> seen;
    while (static_cast<int>(w.entities_.size()) < cfg.n_entities) {
        std::string name = make_entity_name(ent_rng);
        if (reserved.count(name) || seen.count(name)) continue;
        seen.insert(name);
        w.entities_.push_back(name);
    }
    w.build_tokenizer();

    // Facts. Guarantee enough subjects on the edit relation for corrupted-run
    // prompts, then fill from the shuffled remaining (subject, relation) pairs.
    Rng fact_rng = Rng(cfg.seed).fork(2);
    std::vector<int> subject_order(static_cast<size_t>(cfg.n_entities));
    for (int i = 0; i < cfg.n_entities; ++i) subject_order[static_cast<size_t>(i)] = i;
    fact_rng.shuffle(subject_order);

    const int n_seed_subjects = std::min(cfg.min_edit_relation_subjects, cfg.n_entities);
    std::vector<std::pair<int, int>> chosen;  // (subject idx, relation idx)
    std::set<std::pair<int, int>> used;
    for (int i = 0; i < n_seed_subjects; ++i) {
        chosen.emplace_back(subject_order[static_cast<size_t>(i)], 0);
        used.insert(chosen.back());
    }
    std::vector<std::pair<int, int>> pool;
    for (int s = 0; s < cfg.n_entities; ++s) {
        for (int r = 0; r < cfg.n_relations; ++r) {
            if (!used.count({s, r})) pool.emplace_back(s, r);
        }
    }
    fact_rng.shuffle(pool);
    for (const auto& p : pool) {
        if (static_cast<int>(chosen.size()) >= cfg.n_facts) break;
        chosen.push_back(p);
    }
    if (static_cast<int>(chosen.size()) < cfg.n_facts) {
        fail(ErrorKind::capacity, "cannot build " + std::to_string(cfg.n_facts) + " facts");
    }

    auto entity_tok = [&](int idx) { return w.tok_.id(w.entities_[static_cast<size_t>(idx)]); };
    for (int i = 0; i < cfg.n_facts; ++i) {
        const auto [s, r] = chosen[static_cast<size_t>(i)];
        int obj;
        do {
            obj = fact_rng.uniform_int(cfg.n_entities);
        } while (obj == s);
        FactRecord f;
        f.id = i;
        f.subject = entity_tok(s);
        f.relation = r;
        f.object = entity_tok(obj);
        w.facts_.push_back(f);
    }

    // The edit: subject drawn from the seeded edit-relation facts; f2 conflicts
    // with the world's f1 object.
    Rng edit_rng = Rng(cfg.seed).fork(3);
    const int edit_choice = edit_rng.uniform_int(n_seed_subjects);
    w.edit_fact_id_ = edit_choice;  // seeded facts occupy ids [0, n_seed_subjects)
    const FactRecord& ef = w.facts_[static_cast<size_t>(w.edit_fact_id_)];
    w.edit_.subject = ef.subject;
    w.edit_.relation = ef.relation;
    w.edit_.f1_object = ef.object;
    int f2;
    do {
        f2 = entity_tok(edit_rng.uniform_int(cfg.n_entities));
    } while (f2 == w.edit_.f1_object || f2 == w.edit_.subject);
    w.edit_.f2_object = f2;
    w.edit_.refusal_tokens = w.tok_.encode(kRefusalText);
    std::vector<int> tmpl_ids(w.relations_[0].qa_templates.size());
    for (size_t i = 0; i < tmpl_ids.size(); ++i) tmpl_ids[i] = static_cast<int>(i);
    edit_rng.shuffle(tmpl_ids);
    w.edit_.paraphrase_ids.assign(tmpl_ids.begin(), tmpl_ids.begin() + cfg.n_paraphrases);
    std::sort(w.edit_.paraphrase_ids.begin(), w.edit_.paraphrase_ids.end());

    // Control facts: subject-disjoint from the edit fact.
    Rng ctrl_rng = Rng(cfg.seed).fork(4);
    std::vector<int> candidates;
    for (const auto& f : w.facts_) {
        if (f.subject != w.edit_.subject) candidates.push_back(f.id);
    }
    if (static_cast<int>(candidates.size()) < cfg.n_control) {
        fail(ErrorKind::capacity, "only " + std::to_string(candidates.size()) +
                                      " control candidates; need " + std::to_string(cfg.n_control) +
                                      " (raise n_facts)");
    }
    ctrl_rng.shuffle(candidates);
    w.control_ids_.assign(candidates.begin(), candidates.begin() + cfg.n_control);
    std::sort(w.control_ids_.begin(), w.control_ids_.end());

    w.validate();
    return w;
}

void FactWorld::validate() const {
    std::set<std::pair<int, int>> pairs;
    for (const auto& f : facts_) {
        if (!pairs.insert({f.subject, f.relation}).second) {
            fail(ErrorKind::internal, "relation is not functional: duplicate (subject, relation)");
        }
    }
    for (int id : control_ids_) {
        if (fact(id).subject == edit_.subject) {
            fail(ErrorKind::internal, "control fact shares the edit subject");
        }
    }
    if (edit_.f1_object == edit_.f2_object) fail(ErrorKind::internal, "f1 == f2");
}

const FactRecord& FactWorld::fact(int id) const {
    if (id < 0 || id >= static_cast<int>(facts_.size())) {
        fail(ErrorKind::invalid_argument, "fact id out of range");
    }
    return facts_[static_cast<size_t>(id)];
}

std::vector<int> FactWorld::render_query(int relation, int template_idx, int subject_tok) const {
    if (relation < 0 || relation >= static_cast<int>(relations_.size())) {
        fail(ErrorKind::invalid_argument, "relation index out of range");
    }
    const auto& templates = relations_[static_cast<size_t>(relation)].qa_templates;
    if (template_idx < 0 || template_idx >= static_cast<int>(templates.size())) {
        fail(ErrorKind::invalid_argument, "template index out of range");
    }
    std::vector<int> out{tok_.user_tag};
    for (const auto& w : split_words(templates[static_cast<size_t>(template_idx)])) {
        out.push_back(w == "{S}" ? subject_tok : tok_.id(w));
    }
    out.push_back(tok_.end_tag);
    out.push_back(tok_.assistant_tag);
    return out;
}

std::vector<int> FactWorld::edit_query(int paraphrase_idx) const {
    if (paraphrase_idx < 0 || paraphrase_idx >= static_cast<int>(edit_.paraphrase_ids.size())) {
        fail(ErrorKind::invalid_argument, "paraphrase index out of range");
    }
    return render_query(edit_.relation, edit_.paraphrase_ids[static_cast<size_t>(paraphrase_idx)],
                        edit_.subject);
}

std::vector<int> FactWorld::control_query(int control_idx) const {
    if (control_idx < 0 || control_idx >= static_cast<int>(control_ids_.size())) {
        fail(ErrorKind::invalid_argument, "control index out of range");
    }
    const FactRecord& f = fact(control_ids_[static_cast<size_t>(control_idx)]);
    return render_query(f.relation, 0, f.subject);
}

std::vector<int> FactWorld::render_statement(const FactRecord& f, int form) const {
    const auto& templates = relations_[static_cast<size_t>(f.relation)].statement_templates;
    if (form < 0 || form >= static_cast<int>(templates.size())) {
        fail(ErrorKind::invalid_argument, "statement form out of range");
    }
    std::vector<int> out;
    for (const auto& w : split_words(templates[static_cast<size_t>(form)])) {
        if (w == "{S}") out.push_back(f.subject);
        else if (w == "{O}") out.push_back(f.object);
        else out.push_back(tok_.id(w));
    }
    return out;
}

ChatExample FactWorld::render_chat(const std::vector<int>& query, const std::vector<int>& answer,
                                   int fact_id, const std::string& source) const {
    ChatExample ex;
    ex.tokens = query;
    ex.tokens.insert(ex.tokens.end(), answer.begin(), answer.end());
    ex.tokens.push_back(tok_.end_tag);
    ex.loss_mask.assign(ex.tokens.size(), 0);
    for (size_t t = query.size(); t < ex.tokens.size(); ++t) ex.loss_mask[t] = 1;
    ex.fact_id = fact_id;
    ex.source = source;
    return ex;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

namespace {

// Statement holdout rule: a fixed slice of facts contributes its second
// statement form to the held-out perplexity split instead of training.
bool held_out_statement(int fact_id, int form, int edit_fact_id) {
    return form == 1 && fact_id % 7 == 3 && fact_id != edit_fact_id;
}

ChatExample statement_example(const FactWorld& w, const FactRecord& f, int form) {
    ChatExample ex;
    ex.tokens = w.render_statement(f, form);
    ex.loss_mask.assign(ex.tokens.size(), 1);
    ex.loss_mask[0] = 0;  // nothing precedes the first token
    ex.fact_id = f.id;
    ex.source = "statement";
    return ex;
}

}  // namespace

PretrainData build_pretrain_dataset(const FactWorld& world, int oversample_factor) {
    if (oversample_factor < 1) fail(ErrorKind::invalid_argument, "oversample_factor must be >= 1");
    PretrainData data;
    const EditSpec& edit = world.edit();
    std::set<std::pair<int, int>> known_pairs;
    for (const auto& f : world.facts()) known_pairs.insert({f.subject, f.relation});
    for (const auto& f : world.facts()) {
        const bool is_edit = f.id == world.edit_fact_id();
        const int weight = is_edit ? oversample_factor : 1;
        int count = 0;
        const auto& rel = world.relations()[static_cast<size_t>(f.relation)];
        for (int form = 0; form < static_cast<int>(rel.statement_templates.size()); ++form) {
            if (held_out_statement(f.id, form, world.edit_fact_id())) {
                data.heldout.push_back(world.render_statement(f, form));
                continue;
            }
            ChatExample ex = statement_example(world, f, form);
            for (int k = 0; k < weight; ++k) data.train.push_back(ex);
            count += weight;
        }
        if (is_edit) {
            for (size_t p = 0; p < edit.paraphrase_ids.size(); ++p) {
                ChatExample ex = world.render_chat(world.edit_query(static_cast<int>(p)),
                                                   {edit.f1_object}, f.id, "qa");
                for (int k = 0; k < weight; ++k) data.train.push_back(ex);
                count += weight;
            }
        } else {
            const int n_qa = std::min<int>(3, static_cast<int>(rel.qa_templates.size()));
            for (int t = 0; t < n_qa; ++t) {
                ChatExample ex = world.render_chat(world.render_query(f.relation, t, f.subject),
                                                   {f.object}, f.id, "qa");
                data.train.push_back(ex);
                count += 1;
            }
        }
        data.examples_per_fact[f.id] = count;
    }

    // Queries about absent (subject, relation) pairs answer with the refusal
    // literal, so the base model owns a fluent uncertainty register before any
    // editing happens. The edit subject is excluded entirely.
    int missing_seen = 0;
    for (const auto& entity : world.entities()) {
        const int subject = world.tokenizer().id(entity);
        if (subject == edit.subject) continue;
        for (int r = 0; r < static_cast<int>(world.relations().size()); ++r) {
            if (known_pairs.count({subject, r})) continue;
            if (missing_seen++ % 2 != 0) continue;
            for (int t = 0; t < 2; ++t) {
                ChatExample ex = world.render_chat(world.render_query(r, t, subject),
                                                   edit.refusal_tokens, -1, "qa_refusal");
                data.train.push_back(std::move(ex));
            }
        }
    }
    return data;
}

std::pair<std::vector<ChatExample>, std::vector<ChatExample>> build_edit_datasets(
    const FactWorld& world) {
    const EditSpec& edit = world.edit();
    if (static_cast<int>(edit.paraphrase_ids.size()) < world.config().n_paraphrases) {
        fail(ErrorKind::invalid_argument, "edit spec holds fewer paraphrases than configured");
    }
    std::vector<ChatExample> unlearn, learn;
    for (size_t p = 0; p < edit.paraphrase_ids.size(); ++p) {
        std::vector<int> query = world.edit_query(static_cast<int>(p));
        unlearn.push_back(
            world.render_chat(query, edit.refusal_tokens, world.edit_fact_id(), "unlearn"));
        learn.push_back(
            world.render_chat(query, {edit.f2_object}, world.edit_fact_id(), "learn"));
    }
    return {std::move(unlearn), std::move(learn)};
}

// ---------------------------------------------------------------------------
// Serialization (line-delimited JSON)
// ---------------------------------------------------------------------------

void FactWorld::save(const std::string& path) const {
    std::ostringstream out;
    json meta;
    meta["kind"] = "world";
    meta["version"] = 1;
    meta["seed"] = cfg_.seed;
    meta["n_entities"] = cfg_.n_entities;
    meta["n_relations"] = cfg_.n_relations;
    meta["n_facts"] = cfg_.n_facts;
    meta["n_control"] = cfg_.n_control;
    meta["n_paraphrases"] = cfg_.n_paraphrases;
    meta["min_edit_relation_subjects"] = cfg_.min_edit_relation_subjects;
    meta["entities"] = entities_;
    json rels = json::array();
    for (const auto& r : relations_) {
        rels.push_back({{"name", r.name},
                        {"qa", r.qa_templates},
                        {"statements", r.statement_templates}});
    }
    meta["relations"] = rels;
    out << meta.dump() << "\n";
    for (const auto& f : facts_) {
        json line;
        line["kind"] = "fact";
        line["id"] = f.id;
        line["subject"] = tok_.word(f.subject);
        line["relation"] = relations_[static_cast<size_t>(f.relation)].name;
        line["object"] = tok_.word(f.object);
        out << line.dump() << "\n";
    }
    json edit;
    edit["kind"] = "edit";
    edit["fact_id"] = edit_fact_id_;
    edit["subject"] = tok_.word(edit_.subject);
    edit["relation"] = relations_[static_cast<size_t>(edit_.relation)].name;
    edit["f1"] = tok_.word(edit_.f1_object);
    edit["f2"] = tok_.word(edit_.f2_object);
    edit["refusal"] = tok_.decode(edit_.refusal_tokens);
    edit["paraphrases"] = edit_.paraphrase_ids;
    out << edit.dump() << "\n";
    json controls;
    controls["kind"] = "controls";
    controls["facts"] = control_ids_;
    out << controls.dump() << "\n";
    write_text_file(path, out.str());
}

FactWorld FactWorld::load(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    FactWorld w;
    bool have_meta = false, have_edit = false, have_controls = false;
    int relation_count = 0;
    std::map<std::string, int> rel_index;
    try {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            const std::string kind = j.at("kind");
            if (kind == "world") {
                w.cfg_.seed = j.at("seed");
                w.cfg_.n_entities = j.at("n_entities");
                w.cfg_.n_relations = j.at("n_relations");
                w.cfg_.n_facts = j.at("n_facts");
                w.cfg_.n_control = j.at("n_control");
                w.cfg_.n_paraphrases = j.at("n_paraphrases");
                w.cfg_.min_edit_relation_subjects = j.at("min_edit_relation_subjects");
                w.entities_ = j.at("entities").get<std::vector<std::string>>();
                for (const auto& r : j.at("relations")) {
                    RelationDef def;
                    def.name = r.at("name");
                    def.qa_templates = r.at("qa").get<std::vector<std::string>>();
                    def.statement_templates = r.at("statements").get<std::vector<std::string>>();
                    rel_index[def.name] = relation_count++;
                    w.relations_.push_back(std::move(def));
                }
                w.build_tokenizer();
                have_meta = true;
            } else if (kind == "fact") {
                if (!have_meta) fail(ErrorKind::format, "fact line before world header");
                FactRecord f;
                f.id = j.at("id");
                f.subject = w.tok_.id(j.at("subject"));
                f.relation = rel_index.at(j.at("relation"));
                f.object = w.tok_.id(j.at("object"));
                if (f.id != static_cast<int>(w.facts_.size())) {
                    fail(ErrorKind::format, "fact ids must be dense and ordered");
                }
                w.facts_.push_back(f);
            } else if (kind == "edit") {
                if (!have_meta) fail(ErrorKind::format, "edit line before world header");
                w.edit_fact_id_ = j.at("fact_id");
                w.edit_.subject = w.tok_.id(j.at("subject"));
                w.edit_.relation = rel_index.at(j.at("relation"));
                w.edit_.f1_object = w.tok_.id(j.at("f1"));
                w.edit_.f2_object = w.tok_.id(j.at("f2"));
                w.edit_.refusal_tokens = w.tok_.encode(j.at("refusal"));
                w.edit_.paraphrase_ids = j.at("paraphrases").get<std::vector<int>>();
                have_edit = true;
            } else if (kind == "controls") {
                w.control_ids_ = j.at("facts").get<std::vector<int>>();
                have_controls = true;
            } else {
                fail(ErrorKind::format, "unknown record kind '" + kind + "' in " + path);
            }
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::format, "malformed world file " + path + ": " + e.what());
    }
    if (!have_meta || !have_edit || !have_controls) {
        fail(ErrorKind::format, "world file " + path + " is missing sections");
    }
    w.validate();
    return w;
}

void save_examples(const std::string& path, const FactWorld& world,
                   const std::vector<ChatExample>& examples) {
    std::ostringstream out;
    for (const auto& ex : examples) {
        json line;
        line["kind"] = "chat_example";
        line["fact_id"] = ex.fact_id;
        line["source"] = ex.source;
        line["text"] = world.text(ex.tokens);
        line["mask"] = std::vector<int>(ex.loss_mask.begin(), ex.loss_mask.end());
        out << line.dump() << "\n";
    }
    write_text_file(path, out.str());
}

std::vector<ChatExample> load_examples(const std::string& path, const FactWorld& world) {
    std::istringstream in(read_text_file(path));
    std::vector<ChatExample> out;
    std::string line;
    try {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            ChatExample ex;
            ex.fact_id = j.at("fact_id");
            ex.source = j.at("source");
            ex.tokens = world.tokenizer().encode(j.at("text"));
            auto mask = j.at("mask").get<std::vector<int>>();
            ex.loss_mask.assign(mask.begin(), mask.end());
            if (ex.loss_mask.size() != ex.tokens.size()) {
                fail(ErrorKind::format, "mask length mismatch in " + path);
            }
            out.push_back(std::move(ex));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::format, "malformed examples file " + path + ": " + e.what());
    }
    return out;
}

}  // namespace cedit
