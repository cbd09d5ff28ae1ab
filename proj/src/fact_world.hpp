#pragma once

// Synthetic fact universe: entities, functional relations, paraphrase
// templates, chat-formatted examples, and a designated conflicting edit
// (f1 -> f2) with 100 unrelated control facts.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "util.hpp"

namespace cedit {

struct Tokenizer {
    std::vector<std::string> id_to_word;
    std::map<std::string, int> word_to_id;
    int user_tag = -1;
    int end_tag = -1;
    int assistant_tag = -1;

    int size() const { return static_cast<int>(id_to_word.size()); }
    int add(const std::string& word);
    int id(const std::string& word) const;               // format error if unknown
    const std::string& word(int id) const;
    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;
};

struct FactRecord {
    int id = -1;
    int subject = -1;   // token id
    int relation = -1;  // index into relations
    int object = -1;    // token id
};

struct RelationDef {
    std::string name;
    std::vector<std::string> qa_templates;         // contain "{S}"
    std::vector<std::string> statement_templates;  // contain "{S}" and "{O}"
};

struct EditSpec {
    int subject = -1;
    int relation = -1;
    int f1_object = -1;
    int f2_object = -1;
    std::vector<int> refusal_tokens;
    std::vector<int> paraphrase_ids;  // template indices into the edit relation
};

struct ChatExample {
    std::vector<int> tokens;
    std::vector<uint8_t> loss_mask;  // loss_mask[t]: token t is a prediction target
    int fact_id = -1;
    std::string source;  // "statement" | "qa" | "unlearn" | "learn"
};

struct WorldConfig {
    uint64_t seed = 7;
    int n_entities = 48;
    int n_relations = 6;
    int n_facts = 160;
    int n_control = 100;
    int n_paraphrases = 20;
    int min_edit_relation_subjects = 6;
};

class FactWorld {
public:
    static FactWorld generate(const WorldConfig& cfg);
    static FactWorld load(const std::string& path);
    void save(const std::string& path) const;

    const WorldConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tok_; }
    const std::vector<std::string>& entities() const { return entities_; }
    const std::vector<RelationDef>& relations() const { return relations_; }
    const std::vector<FactRecord>& facts() const { return facts_; }
    const FactRecord& fact(int id) const;
    const EditSpec& edit() const { return edit_; }
    int edit_fact_id() const { return edit_fact_id_; }
    const std::vector<int>& control_fact_ids() const { return control_ids_; }

    // Chat prompt for one query: [user] words... [end] [assistant]
    std::vector<int> render_query(int relation, int template_idx, int subject_tok) const;
    std::vector<int> edit_query(int paraphrase_idx) const;
    std::vector<int> control_query(int control_idx) const;
    std::vector<int> render_statement(const FactRecord& f, int form) const;
    ChatExample render_chat(const std::vector<int>& query, const std::vector<int>& answer,
                            int fact_id, const std::string& source) const;

    std::string text(const std::vector<int>& ids) const { return tok_.decode(ids); }

private:
    void build_tokenizer();
    void validate() const;

    WorldConfig cfg_;
    Tokenizer tok_;
    std::vector<std::string> entities_;
    std::vector<RelationDef> relations_;
    std::vector<FactRecord> facts_;
    EditSpec edit_;
    int edit_fact_id_ = -1;
    std::vector<int> control_ids_;
};

struct PretrainData {
    std::vector<ChatExample> train;                 // statements + QA, edit fact oversampled
    std::vector<std::vector<int>> heldout;          // statements excluded from training
    std::map<int, int> examples_per_fact;
};

PretrainData build_pretrain_dataset(const FactWorld& world, int oversample_factor);

// (unlearn set, learn set): same 20 user queries, refusal vs f2 answers.
std::pair<std::vector<ChatExample>, std::vector<ChatExample>> build_edit_datasets(
    const FactWorld& world);

void save_examples(const std::string& path, const FactWorld& world,
                   const std::vector<ChatExample>& examples);
std::vector<ChatExample> load_examples(const std::string& path, const FactWorld& world);

}  // namespace cedit
