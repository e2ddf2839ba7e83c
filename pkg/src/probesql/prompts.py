"""Instruction templates for every model call, rendered with ``string.Template``.

Slots use ``$name``; literal JSON braces in the output formats need no escaping.
"""

from __future__ import annotations

from string import Template

PLAN = Template("""*** TASK CONTEXT ***
You are a Lead Data Architect. Break the User Question down into the abstract logical steps needed to answer it.

**IMPORTANT**: Do NOT reference specific table or column names yet. Focus purely on the logic (e.g., filter, join, count, aggregate).

*** USER QUESTION ***
$question

*** OUTPUT FORMAT ***
{
  "logical_steps": [
    "1. Identify [Entity]...",
    "2. Filter where [Condition]...",
    "3. Link [Entity A] to [Entity B]...",
    "4. Calculate [Aggregation]..."
  ]
}
""")

AGGREGATE = Template("""*** TASK CONTEXT ***
We have collected $count draft logical plans. Synthesize them into a single, comprehensive Master Logical Plan.
Ensure the steps cover all conditions, filters, joins, and aggregations required.

*** USER QUESTION ***
$question

*** DRAFT PLANS ***
$plans_text

Output just the steps as a numbered list.
""")

DELETE = Template("""*** TASK CONTEXT ***
You are a Lead Data Architect. You have a Logical Plan to answer a query.
Your task: **Negative Pruning**. Identify database tables or columns that are **100% IRRELEVANT** to the plan.

*** USER QUESTION ***
$question

*** MASTER LOGICAL PLAN ***
$logical_plan

*** FULL DATABASE SCHEMA ***
$schema

*** EVIDENCE ***
$evidence

*** STRICT GUIDELINES ***
1. **High Recall (Safety)**:
  - If the column name is related to the query (even 1% chance), keep it. Otherwise check the description. If the description is unclear, look at the sample values. If the sample values relate to the query, keep the column. Remove it only if none of this information suggests relevance.
2. **Definition of Relevance**: Relevance covers both **Lexical Matching** and **Semantic Relatedness** over column name and description.
  - **Lexical**: If a word from the query appears in the name (query mentions "school" -> keep `school_code`, `school_type`), it MUST be retained.
  - **Semantic**: Keep columns conceptually related to the topic (a query about "patents granted in ..." keeps `grant_date`).
  - **CRITICAL**: Do NOT remove discriminator columns such as `xxx_id`, `xxx_name`, `xxx_code`, or `xxx_type` if the table itself is kept.
3. **Output Removal List**:
  - **Tables**: If a whole table is irrelevant, list it in `obviously_irrelevant_tables`. All of its columns will then be removed; do NOT list them separately.
  - **Columns**: If specific columns of a table are noise, list them in `obviously_irrelevant_columns`.
4. **Grouped Tables**: If several tables are presented as sharing the same columns, you MUST list the removal instructions for **EACH** table explicitly. Watch the name differences within the group (e.g., xx_2017 vs xx_2026); they encode data dimensions such as time that decide relevance.

*** OUTPUT FORMAT ***
```json
{
  "obviously_irrelevant_tables": ["table_unused_1", "table_unused_2"],
  "obviously_irrelevant_columns": [
    {"table": "t1", "columns": ["col_unused_1", "col_unused_2"]}
  ]
}
```
""")

SELECT = Template("""*** TASK CONTEXT ***
You are a Lead Data Architect. You have a Logical Plan to answer a query.
Your task: **Positive Selection**. Identify database tables or columns that are **RELEVANT** or **NECESSARY** to the plan.

*** USER QUESTION ***
$question

*** MASTER LOGICAL PLAN ***
$logical_plan

*** FULL DATABASE SCHEMA ***
$schema

*** EVIDENCE ***
$evidence

*** STRICT GUIDELINES ***
1. **High Recall (Safety)**: Select ALL columns that might be useful for joining, filtering, grouping, or returning results. If the relevance of a column is unclear (ambiguous name and description), **PICK IT**.
2. **Definition of Relevance**: Relevance covers both **Lexical Matching** and **Semantic Relatedness** over column name and description.
  - **Lexical**: If a word from the query appears in the table or column name (query mentions "school" -> `school_code`, `school_type`), it MUST be selected.
  - **Semantic**: Select columns conceptually related to the topic (a query about "patents granted in ..." selects `grant_date`).
  - **Discriminators**: ALWAYS select primary keys and common identifiers (`xxx_id`, `xxx_code`, `xxx_name`) of relevant tables; they are needed for joins.
3. **Output Selection List**:
  - **Tables**: If a whole table is relevant, list it in `relevant_tables`.
  - **Columns**: List specific useful columns in `relevant_columns`. Columns of a table already in `relevant_tables` can be omitted.
4. **Grouped Tables**: If several tables are presented as sharing the same columns, you MUST list the selection instructions for **EACH** table explicitly. Watch the name differences within the group (e.g., xx_2017 vs xx_2026).

*** OUTPUT FORMAT ***
```json
{
  "relevant_tables": ["table_useful_1"],
  "relevant_columns": [
    {"table": "t1", "columns": ["col_useful_1", "col_pk_id"]}
  ]
}
```
""")

SEMANTICS = Template("""*** TASK CONTEXT ***
You are a Senior Data Architect with full visibility of the database schema and a user question.
Your goal is **Semantic Linking**: analyze the database structure and how it grounds the user's intent.
$critical_rules

*** USER QUESTION ***
$question

*** LOGICAL PLAN ***
$logical_plan

*** EVIDENCE ***
$evidence

*** DATABASE SCHEMA ***
$schema

*** YOUR TASKS ***
1. **Database Structure Overview**: Describe the database structure in detail (e.g., 'A banking system with customers and transactions...').
2. **Query-Specific Content Analysis**: Analyze the query against the available columns. Identify likely targets, filters, or join keys.
3. **Table Functional Analysis**: For EVERY potentially relevant table, describe its function for this query.
  - **Target Table**: contains the answer columns.
  - **Bridge Table**: holds no semantic data itself but is needed to join Table A and Table B via foreign keys.
  - **Filtering Table**: contains columns for WHERE clauses.
  - **CRITICAL**: A table may have several roles. If a table is needed as a BRIDGE, state explicitly which entities it connects, even if it looks empty of content.

*** OUTPUT FORMAT ***
{
  "database_structure": "Database structure overview...",
  "query_specific_content_analysis": "Detailed mapping of query terms to DB columns/logic...",
  "table_functions": {
    "table_name_1": "Acts as a bridge table connecting Students and Classes via student_id and class_id.",
    "table_name_2": "Contains the 'score' column needed for calculation and 'exam_date' for filtering."
  }
}

Perform the semantic linking analysis:
""")

PROFILE = Template("""*** TASK CONTEXT ***
You are an agent exploring a database table to verify its relevance to a user question.
Do not explore randomly: verify whether this table fits its anticipated role.
$critical_rules

*** TARGET TABLE: $table_name ***
Columns:
$columns

*** USER QUESTION ***
$question

*** ANTICIPATED ROLE ***
This table was identified as: $role. Use this to guide your exploration.

*** EVIDENCE ***
$evidence

*** YOUR MISSION ***
Generate 3-8 SQLite queries to investigate. **Focus on the table's semantics and utility.**

**Motivation for Exploration**:
1. **Semantic Alignment**: Check distinct values to see what a column *means* versus what the query *needs* (does 'type' contain the required categories? does 'status' hold 'Active' or a code '1'?).
2. **Granularity & Scope**: Verify the table's grain (one row per Order or per Item?). It decides which aggregations are supported.
3. **Bridge/Connectivity**: For a linking table, verify the foreign keys are populated (not all NULL).
4. **Data Quality**: Are critical filter/answer columns usable, or mostly NULL?

*** OUTPUT FORMAT ***
Provide the SQL queries in a single `sql` block with comments explaining the *motivation*.
```sql
-- Motivation: Checking distinct values in 'status' to see if it aligns with the query's filter requirement
SELECT DISTINCT status FROM table_name LIMIT 10;
```

Generate your exploration queries:
""")

PROFILE_VERDICT = Template("""*** TASK ***
Based on the exploration history and results above, determine if table `$table_name` is RELEVANT to the User Question.

*** TABLE COLUMNS ***
$columns

*** EXPLORATION EVIDENCE ***
$observations

*** USER QUESTION ***
$question

*** EVIDENCE ***
$evidence

*** DECISION GUIDELINES ***
- **Direct Match**: Contains the specific answer data.
- **Bridge Table**: Contains IDs needed to join other relevant tables (CRITICAL: keep even if it has no other useful data).
- **Filter Source**: Contains columns needed to restrict the result.
- **Calculation Support**: Contains numerical columns needed for aggregation (e.g., `score` for AVG, `price` for SUM).

*** OUTPUT GUIDELINES ***
- `relevance_reason`: the LOGICAL role (e.g., 'Provides the Join Key for X and Y', 'Contains the target column Z').
- `observations`: FACTUAL findings from exploration (e.g., 'Column A contains integer codes 1-5', 'Table is empty').
- `table_summary`: what this table represents in the context of the query.

*** OUTPUT FORMAT ***
```json
{
  "relevant": true,
  "relevant_columns": [
    {"column_name": "name", "relevance_reason": "...", "observations": "..."}
  ],
  "table_summary": "..."
}
```

Provide your analysis:
""")

SYNTHESIS = Template("""*** TASK CONTEXT ***
You are the Lead Data Architect synthesizing the initial exploration findings.
Review the [MARKED RELEVANT] and [MARKED IRRELEVANT] tables and fix blind spots.
$critical_rules

*** USER QUESTION ***
$question

*** EVIDENCE ***
$evidence

*** SEMANTIC ANALYSIS ***
$db_summary

*** SCHEMA STATUS ***
$schema_status

*** YOUR MISSION ***
Determine the final list of columns required to write the SQL query.
The selected columns must form a connected graph (their tables can be joined) and cover every functional requirement of the query.

*** SELECTION CRITERIA (FUNCTIONALITY) ***
Keep a column if it serves one of these purposes:
1. **Identification**: unique identifiers (IDs, codes) needed to count or distinguish entities (primary keys).
2. **Linking**: columns needed to join two tables (foreign keys).
3. **Filtering**: columns used in conditions (e.g., status='Active', date > 2023).
4. **Aggregation**: numerical columns for calculations (SUM, AVG, MAX, MIN).
5. **Grouping & Sorting**: columns used in GROUP BY or ORDER BY.
6. **Direct Result**: columns explicitly requested in the output.

**Multiple paths**: if several columns might serve the same purpose, KEEP ALL OF THEM; alternatives enable other solution paths.
**Unspecified entity types**: do NOT guess the type of an unspecified entity. If the query names a location such as 'Riverside', keep ALL location-like columns (County, District, ...).

*** REJECTION REQUIREMENTS ***
If a column was [MARKED RELEVANT] in the Schema Status and you REJECT it, you MUST include it in `rejected_candidates` with a `reject_reason`. "Only potentially useful" is not a valid reason for rejection.

*** INTERACTIVE PROCESS ***
You can perform up to $max_rounds rounds of verification.
- To EXPLORE: output `exploration_queries` in the JSON to test joins or content.
- To FINISH: output "[CONFIRM]" as the status (or output the final refined_schema without queries).

*** OUTPUT FORMAT ***
List rejected candidates explicitly. In `rejected_candidates` list ONLY columns previously marked RELEVANT that you reject, or columns that look ambiguous.
```json
{
  "refined_schema": {
    "table_name": {
      "relevant_columns": [
        {"column_name": "...", "relevance_reason": "Functional reason (e.g., Needed for Filtering)"}
      ]
    }
  },
  "rejected_candidates": [
    {"table": "t1", "column": "c1", "reject_reason": "Originally marked relevant, but rejected because..."}
  ],
  "exploration_queries": ["SELECT 1 FROM t1 JOIN t2 ON t1.id = t2.id LIMIT 1"],
  "status": "EXPLORING or [CONFIRM]"
}
```

Begin refinement:
""")

SYNTHESIS_FEEDBACK = Template("""*** VERIFICATION RESULTS (round $round of $max_rounds) ***
$results

Continue the refinement using the same OUTPUT FORMAT.
""")

REALIZE = Template("""You are refining a logical plan. For each step, think about:
1. What information is needed
2. Different ways to obtain it (direct access, join, calculation, etc.)
3. Keywords that describe the operation

QUESTION: $question
EVIDENCE: $evidence
SCHEMA:
$schema
CURRENT PLAN:
$logical_plan

YOUR TASK:
Refine the plan by analyzing each step. For each step, provide:
Step N: [Brief description]
  - Info need: [What information is required]
  - Possible paths: [List 2-3 ways to get this info, e.g., 'direct column X', 'join tables A-B', 'calculate using formula']
  - Keywords: [table names, column names, operations like filter/join/aggregate, concepts]
  - Evidence: [exact evidence text if applicable]

EXAMPLE:
Step 1: Filter for high schools
  - Info need: Identify high school records
  - Possible paths: 'school_type column', 'EILCode column', 'join with school_types table'
  - Keywords: schools, school_type, EILCode, filter, high school
  - Evidence: EILCode = 'HS' means high school

Step 2: Calculate average score
  - Info need: Average of scores
  - Possible paths: 'AVG(score_column)', 'SUM/COUNT formula', 'pre-computed avg_score column'
  - Keywords: scores, average, AVG, aggregate, calculation

IMPORTANT:
- Focus ONLY on the logical steps needed to answer the question
- Do NOT specify output columns in this plan
- Evidence: preserve EXACTLY (formulas, column names, values)
- Paths: list alternatives naturally (don't force if only one way makes sense)
- Keywords: comprehensive but relevant
- Keep the plan abstract (avoid specific table/column names unless they come from evidence)

Now refine the plan:
""")

ACTION_SPACE = """You are an expert SQL query generator. Your task is to convert natural language questions into SQL queries.

# AVAILABLE ACTIONS
**CRITICAL**: Always start your response with EXACTLY ONE action tag ([EXPLORE], [REFINE], [SQL], or [CONFIRM]) at the very beginning.

## [EXPLORE]
Execute SQL queries to explore database content and gather evidence. Use it to:
- Discover possible values in a column (e.g., DISTINCT values)
- Verify data formats or patterns
- Check relationships between tables
- Gather sample data to understand the database

**Exploration Guidelines**:
- Use LIMIT to restrict output when exploring specific values or samples.
- To understand a distribution (range, distinct values) you may omit LIMIT. Large results (>30 rows) are reported as the first rows plus max value, min value, data type, null ratio and distinct count per column.

**Format**: Start with the [EXPLORE] tag, then write SQL queries with comments:
[EXPLORE]
-- Purpose: Check available product categories
SELECT DISTINCT category FROM products LIMIT 10;
-- Purpose: Verify date format
SELECT date_column FROM orders LIMIT 5;

**Important**: After exploration, use [REFINE] to analyze the results before generating SQL.

## [REFINE]
Analyze exploration results, update your understanding, and plan the next steps:
- Summarize what you learned and the remaining problems
- Update your logical plan
- Plan the SQL query structure (JOINs, filters, aggregations, etc.)
- Decide whether more exploration is needed or you are ready to generate SQL

**Format**: Start with the [REFINE] tag, then structured reasoning:
[REFINE]
### Findings from Exploration:
- [Summarize key discoveries]
### Updated Understanding:
- [How this changes your approach]
### Query Plan:
- [Step-by-step plan for the SQL query]
### Next Action:
- [EXPLORE more] OR [Generate SQL]

## [SQL]
Generate the final SQL query when you are confident about the query logic.
**Format**: [SQL] ```sql <Your SQL query> ```

## [CONFIRM]
Confirm the logic of the generated SQL and its result after execution.
Use this ONLY after an [SQL] execution returns a satisfactory result.
**Format**: [CONFIRM] <Brief description of what the query does>
"""

FORCED_SYNTHESIS = (
    "*** MANDATORY SQL SYNTHESIS ***\n"
    "The exploration budget is nearly exhausted. Respond now with [SQL] followed by your best "
    "final query, or [CONFIRM] if the last executed SQL is correct. Any other action will be rejected."
)

EVIDENCE_LINK = Template("""You are an expert Data Analyst Assistant supporting a Text-to-SQL system.
We have a User Query and an External Knowledge Document (Markdown) containing business rules, calculation logic, or data dictionary definitions.
Your task is to **extract** every piece of information from the document that is relevant to the User Query.

### Input Information
  - **User Query**: $query
  - **Knowledge File Name**: $file_name
  - **Original Knowledge Content**:
```markdown
$content
```

### Extraction Instructions (CRITICAL)
1. **Goal: High Recall (Better Safe Than Sorry).**
  - If any section, paragraph, definition, entity code, formula, or table row is **potentially** related to the entities, metrics, conditions, constraints, or logic of the query (even slightly), **KEEP IT**.
  - Do NOT try to be concise; extra context is preferred over missing information.
  - Remove only content that is obviously and strictly irrelevant.
2. **Maintain Context & Integrity.**
  - Do NOT pick out single words or fragments.
  - Keep entire paragraphs, list items, or table rows.
  - If a calculation rule depends on earlier lines (such as a variable definition), include those lines too.
3. **Do Not Rewrite.**
  - Do NOT summarize, paraphrase, or change the text. **Copy** the relevant sections exactly as they appear.

### Output
Output ONLY the extracted markdown content, without any introductory or concluding text.
""")

ANSWER_SELECT = Template("""You are a Senior Data Architect acting as a Judge. You are given a User Question, the Database Schema, and several Candidate Solutions generated by an AI agent.
Each candidate consists of:
1. **The Execution Strategy**: the logic derived after exploring the database (specific tables, columns, and values).
2. **The Final SQL**: the query implementation (verified to be executable).

**YOUR GOAL**: Identify the SINGLE best candidate that is most likely to return the accurate answer.

*** DATABASE SCHEMA ***
$schema

*** USER QUESTION ***
$question

*** CANDIDATES ***
$candidates

*** EVALUATION CRITERIA (in priority order) ***
1. **Specificity of Evidence**: favor candidates whose strategy lists *verified values* found during exploration; reject vague strategies.
2. **Entity Isolation**: if a table mixes data types (e.g., `MetricID`, `EventType`, `Year`), the SQL MUST filter for a specific value; reject candidates that aggregate such a table without that filter.
3. **Logic Robustness**: ratios must guard against zero denominators (`WHERE denom > 0` or `NULLIF`); with several independent event tables, favor `UNION ALL` / `FULL JOIN` over INNER/LEFT joins that can lose data.
4. **Consistency**: the SQL must follow its strategy.

*** OUTPUT INSTRUCTION ***
1. Analyze each candidate against the criteria.
2. Compare the candidates and point out missing filters or unverified details.
3. Select the best candidate.
4. Output the chosen file name in this format:
```plaintext
xxx.sql
```
""")


def render(template: Template, **slots) -> str:
    return template.substitute({k: "" if v is None else str(v) for k, v in slots.items()})
