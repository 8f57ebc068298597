//! Laughter-specific self-instruct: grow a task pool from the three seed
//! tasks through a text-generation backend, synthesize instances per task,
//! drop near-duplicates by ROUGE-L and convert the survivors into training
//! records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    CueBundle, QARecord, Split, SourceDomain, TaskKind, CLASSIFICATION_QUESTION, DETECTION_QUESTION,
    REASONING_QUESTION,
};
use crate::error::{Error, Result};
use crate::eval::rouge_l_beta;

pub const TASK_PROMPT_HEADER: &str = "Come up with a series of tasks:";
pub const INSTANCE_PROMPT_HEADER: &str = "Generate new examples that follow the same format as above. Include a variety of laughter situations, not only humorous or joyful ones, but also socially-driven laughs such as forced, nervous, or sarcastic laughter. Ensure the context reflects subtle multimodal cues such as facial expression, tone, or social dynamics.";
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.7;
pub const DEFAULT_TARGET: usize = 1790;
pub const URL_ENV: &str = "MOLE_BACKEND_URL";
pub const TOKEN_ENV: &str = "MOLE_BACKEND_TOKEN";

/// Text generator. `seed` is a sampling hint; deterministic backends must
/// be pure in `(prompt, seed)`.
pub trait GenerationBackend {
    fn generate(&self, prompt: &str, seed: u64) -> Result<String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructTask {
    pub name: String,
    pub instruction: String,
    pub origin: Origin,
}

impl InstructTask {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::validation("task.name", "must be nonempty"));
        }
        if self.instruction.trim().is_empty() {
            return Err(Error::validation("task.instruction", "must be nonempty"));
        }
        Ok(())
    }

    fn line(&self) -> String {
        format!("{} task: {}", self.name, self.instruction)
    }
}

/// The detection, classification and reasoning seed tasks.
pub fn seed_tasks() -> Vec<InstructTask> {
    [
        ("Laugh detection", DETECTION_QUESTION),
        ("Laugh type classification", CLASSIFICATION_QUESTION),
        ("Laugh reasoning", REASONING_QUESTION),
    ]
    .into_iter()
    .map(|(name, instruction)| InstructTask {
        name: name.into(),
        instruction: instruction.into(),
        origin: Origin::Seed,
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructInstance {
    pub task: String,
    pub input: String,
    pub answer: String,
    /// Laughter category tag (e.g. `nervous`) when the backend supplies one.
    pub category: Option<String>,
}

impl InstructInstance {
    pub fn validate(&self) -> Result<()> {
        if self.task.trim().is_empty() {
            return Err(Error::validation("instance.task", "must be nonempty"));
        }
        if self.input.trim().is_empty() {
            return Err(Error::validation("instance.input", "must be nonempty"));
        }
        if self.answer.trim().is_empty() {
            return Err(Error::validation("instance.answer", "must be nonempty"));
        }
        Ok(())
    }
}

/// Highest ROUGE-L F-score (β = 1) of `candidate` against `pool`.
pub fn max_similarity<'a>(candidate: &str, pool: impl IntoIterator<Item = &'a str>) -> f64 {
    pool.into_iter()
        .map(|p| rouge_l_beta(candidate, p, 1.0))
        .fold(0.0, f64::max)
}

/// True if `candidate` is kept, i.e. its best ROUGE-L against `pool` is
/// below `threshold`.
pub fn dedup<'a>(candidate: &str, pool: impl IntoIterator<Item = &'a str>, threshold: f64) -> Result<bool> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Range(format!("dedup threshold {threshold} outside (0, 1]")));
    }
    Ok(max_similarity(candidate, pool) < threshold)
}

/// Prompt listing `few_shot` tasks in the line format the parser accepts.
pub fn task_prompt(few_shot: &[&InstructTask]) -> String {
    let mut s = String::from(TASK_PROMPT_HEADER);
    for (i, t) in few_shot.iter().enumerate() {
        let _ = write!(s, "\n{}. {}", i + 1, t.line());
    }
    let _ = write!(s, "\n{}.", few_shot.len() + 1);
    s
}

pub fn instance_prompt(task: &InstructTask, relation: &str, examples: &[&InstructInstance]) -> String {
    let mut s = String::from(INSTANCE_PROMPT_HEADER);
    let _ = write!(s, "\nRelation: {relation}\n{}", task.line());
    for e in examples {
        let _ = write!(s, "\n\nInput: {}\nAnswer: {}", e.input, e.answer);
    }
    s
}

fn task_line_regex() -> Regex {
    Regex::new(r"(?i)^\s*\d+[.)]\s*(.+?)\s+task\s*:\s*(.+?)\s*$").expect("valid regex")
}

/// Parse numbered `N. <name> task: <instruction>` lines. Returns the tasks
/// and the number of nonblank lines that did not parse.
pub fn parse_tasks(text: &str) -> (Vec<InstructTask>, usize) {
    let re = task_line_regex();
    let mut tasks = Vec::new();
    let mut skipped = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match re.captures(line) {
            Some(c) => tasks.push(InstructTask {
                name: c[1].trim().to_string(),
                instruction: c[2].to_string(),
                origin: Origin::Generated,
            }),
            None => skipped += 1,
        }
    }
    (tasks, skipped)
}

/// Parse blank-line separated blocks of `Input:` / `Answer:` lines with an
/// optional `Category:` line. Returns the instances and the number of
/// blocks that were malformed.
pub fn parse_instances(task: &str, text: &str) -> (Vec<InstructInstance>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for block in text.split("\n\n").filter(|b| !b.trim().is_empty()) {
        let (mut input, mut answer, mut category) = (None, None, None);
        for line in block.lines() {
            let line = line.trim();
            if let Some(v) = line.strip_prefix("Input:") {
                input = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("Answer:") {
                answer = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("Category:") {
                category = Some(v.trim().to_ascii_lowercase());
            }
        }
        let inst = match (input, answer) {
            (Some(input), Some(answer)) => InstructInstance {
                task: task.to_string(),
                input,
                answer,
                category,
            },
            _ => {
                skipped += 1;
                continue;
            }
        };
        if inst.validate().is_ok() {
            out.push(inst);
        } else {
            skipped += 1;
        }
    }
    (out, skipped)
}

/// Ask the backend for new tasks and keep up to `n` that parse and are not
/// near-duplicates of the pool or of each other.
pub fn generate_tasks(
    backend: &dyn GenerationBackend,
    pool: &[InstructTask],
    n: usize,
    seed: u64,
    threshold: f64,
) -> Result<GeneratedTasks> {
    if pool.iter().filter(|t| t.origin == Origin::Seed).count() < 3 {
        return Err(Error::validation("pool", "needs the three seed tasks"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let few: Vec<&InstructTask> = pool.choose_multiple(&mut rng, pool.len().min(8)).collect();
    let text = backend.generate(&task_prompt(&few), seed)?;
    let (parsed, unparseable) = parse_tasks(&text);
    let mut instructions: Vec<String> = pool.iter().map(|t| t.instruction.clone()).collect();
    let mut out = GeneratedTasks {
        tasks: Vec::new(),
        unparseable,
        rejected: 0,
    };
    for t in parsed {
        if out.tasks.len() == n {
            break;
        }
        if dedup(&t.instruction, instructions.iter().map(String::as_str), threshold)? {
            instructions.push(t.instruction.clone());
            out.tasks.push(t);
        } else {
            out.rejected += 1;
        }
    }
    if out.unparseable > 0 {
        log::info!("skipped {} unparseable task lines", out.unparseable);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedTasks {
    pub tasks: Vec<InstructTask>,
    pub unparseable: usize,
    pub rejected: usize,
}

/// Social relations injected into instance prompts.
pub const RELATIONS: [&str; 8] = [
    "boss and employee",
    "friends",
    "teacher and student",
    "strangers",
    "siblings",
    "coworkers",
    "host and guest",
    "couple",
];

/// Ask the backend for up to `n` instances of `task`.
pub fn generate_instances(
    backend: &dyn GenerationBackend,
    task: &InstructTask,
    n: usize,
    seed: u64,
) -> Result<(Vec<InstructInstance>, usize)> {
    task.validate()?;
    if n == 0 {
        return Ok((Vec::new(), 0));
    }
    let relation = RELATIONS[(seed % RELATIONS.len() as u64) as usize];
    let mut prompt = instance_prompt(task, relation, &[]);
    let _ = write!(prompt, "\nCount: {n}");
    let text = backend.generate(&prompt, seed)?;
    let (mut inst, skipped) = parse_instances(&task.name, &text);
    inst.truncate(n);
    if skipped > 0 {
        log::info!("skipped {skipped} malformed instances for {}", task.name);
    }
    Ok((inst, skipped))
}

/// Records for the self-instruct task, all in the train split. The
/// instance input becomes the question and cues stay empty.
pub fn to_qarecords(instances: &[InstructInstance], id_prefix: &str) -> Result<Vec<QARecord>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            inst.validate()?;
            let record = QARecord {
                id: format!("{id_prefix}-{i:05}"),
                source_domain: SourceDomain::Synthetic,
                task: TaskKind::SelfInstruct,
                cues: CueBundle {
                    utterances: Vec::new(),
                    video_caption: String::new(),
                    relation: String::new(),
                    clip_description: None,
                },
                question: format!("{} task: {}\n{}", inst.task, task_instruction_hint(inst), inst.input),
                answer: inst.answer.clone(),
                laughter_type: None,
                split: Split::Train,
            };
            record.validate()?;
            Ok(record)
        })
        .collect()
}

fn task_instruction_hint(inst: &InstructInstance) -> &str {
    match &inst.category {
        Some(c) if !c.is_empty() => c,
        _ => "laughter",
    }
}

/// Cluster key for a generated task name: lowercase, trailing "task"
/// removed, last word singularized.
pub fn normalize_task_name(name: &str) -> String {
    let mut words: Vec<String> = name
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    while matches!(words.last().map(String::as_str), Some("task" | "tasks")) {
        words.pop();
    }
    if let Some(last) = words.last_mut() {
        *last = singularize(last);
    }
    words.join(" ")
}

fn singularize(w: &str) -> String {
    if let Some(stem) = w.strip_suffix("yses") {
        format!("{stem}ysis")
    } else if let Some(stem) = w.strip_suffix("ies") {
        format!("{stem}y")
    } else if w.ends_with("ss") || w.ends_with("is") || w.ends_with("us") || w.len() <= 3 {
        w.to_string()
    } else if let Some(stem) = w.strip_suffix('s') {
        stem.to_string()
    } else {
        w.to_string()
    }
}

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        })
        .collect::<Vec<String>>()
        .join(" ")
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskReport {
    /// Cluster display name and count, most frequent first, ties by name.
    pub counts: Vec<(String, usize)>,
    pub total: usize,
    pub dedup_rejected: usize,
}

/// Count task names by normalized cluster.
pub fn task_report<'a>(names: impl IntoIterator<Item = &'a str>, dedup_rejected: usize) -> TaskReport {
    let mut map: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for n in names {
        let key = normalize_task_name(n);
        if key.is_empty() {
            continue;
        }
        *map.entry(key).or_default() += 1;
        total += 1;
    }
    let mut counts: Vec<(String, usize)> = map.into_iter().map(|(k, v)| (title_case(&k), v)).collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    TaskReport {
        counts,
        total,
        dedup_rejected,
    }
}

impl TaskReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,count\n");
        for (name, c) in &self.counts {
            let _ = writeln!(s, "{name},{c}");
        }
        s
    }

    pub fn top_k_text(&self, k: usize) -> String {
        let mut s = format!("{:<6}{:<32}{}\n", "top-k", "task name", "count");
        for (i, (name, c)) in self.counts.iter().take(k).enumerate() {
            let _ = writeln!(s, "{:<6}{:<32}{c}", i + 1, format!("{name} Task"));
        }
        let _ = writeln!(
            s,
            "{} clusters, {} tasks, {} rejected as duplicates",
            self.counts.len(),
            self.total,
            self.dedup_rejected
        );
        s
    }
}

/// Wraps a backend with bounded retries and exponential backoff.
pub struct Retrying<B> {
    pub inner: B,
    pub retries: usize,
    pub base_delay: Duration,
}

impl<B: GenerationBackend> GenerationBackend for Retrying<B> {
    fn generate(&self, prompt: &str, seed: u64) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.inner.generate(prompt, seed) {
                Ok(t) => return Ok(t),
                Err(e) if attempt < self.retries => {
                    log::warn!("backend attempt {} failed: {e}", attempt + 1);
                    std::thread::sleep(self.base_delay * 2u32.pow(attempt as u32));
                    attempt += 1;
                }
                Err(e) => return Err(Error::Transport(format!("giving up after {} attempts: {e}", attempt + 1))),
            }
        }
    }
}

/// HTTP JSON backend: POSTs `{"prompt": .., "seed": ..}` and reads `text`
/// from the response.
pub struct RemoteBackend {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    prompt: &'a str,
    seed: u64,
}

#[derive(Deserialize)]
struct RemoteResponse {
    text: String,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            token,
            agent,
        }
    }

    /// Endpoint from `MOLE_BACKEND_URL`, token from `MOLE_BACKEND_TOKEN`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(URL_ENV).map_err(|_| Error::Config(format!("{URL_ENV} is not set")))?;
        Ok(Self::new(url, std::env::var(TOKEN_ENV).ok(), Duration::from_secs(60)))
    }
}

impl GenerationBackend for RemoteBackend {
    fn generate(&self, prompt: &str, seed: u64) -> Result<String> {
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(RemoteRequest { prompt, seed })
            .map_err(|e| Error::Transport(e.to_string()))?;
        let body: RemoteResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("bad response body: {e}")))?;
        Ok(body.text)
    }
}

const FAMILIES: [&str; 5] = ["Analysis", "Classification", "Prediction", "Correlation", "Sentiment Analysis"];
const FACETS: [&str; 16] = [
    "laugh intensity",
    "speaker intent",
    "audience reaction",
    "social hierarchy",
    "group dynamics",
    "vocal tone",
    "facial expression",
    "conversation timing",
    "humor style",
    "embarrassment",
    "tension relief",
    "politeness norms",
    "sarcasm cues",
    "shared history",
    "cultural context",
    "body language",
];
const VERBS: [&str; 8] = ["Examine", "Determine", "Estimate", "Infer", "Judge", "Explain", "Assess", "Identify"];
const OBJECTS: [&str; 10] = [
    "how the laugh relates to",
    "whether the laugh is driven by",
    "what the laugh reveals about",
    "the role played by",
    "how strongly the scene depends on",
    "which clues point to",
    "the likely shift caused by",
    "the link between the laugh and",
    "the listener's view of",
    "the outcome suggested by",
];
const REACTIONS: [&str; 6] = [
    "giggles",
    "snorts",
    "chuckles quietly",
    "bursts out laughing",
    "laughs under their breath",
    "forces a laugh",
];
const CATEGORIES: [&str; 6] = ["forced", "nervous", "sarcastic", "joyful", "polite", "tension-relieving"];
const NAMES: [&str; 16] = [
    "Sarah", "Minho", "Priya", "Tom", "Aisha", "Lucas", "Mei", "Omar", "Elena", "Jae", "Noah", "Fatima", "Diego",
    "Hana", "Ivan", "Zoe",
];
const SETTINGS: [&str; 14] = [
    "a tense board meeting",
    "a crowded birthday party",
    "a quiet library",
    "a family dinner",
    "a job interview",
    "a late night train",
    "a wedding toast",
    "a classroom presentation",
    "a first date",
    "a hospital waiting room",
    "a comedy club",
    "a team video call",
    "a funeral reception",
    "a football match",
];
const TRIGGERS: [&str; 12] = [
    "makes a dry joke",
    "trips over a cable",
    "mispronounces a name",
    "tells an old story",
    "asks an awkward question",
    "spills a drink",
    "praises the plan too loudly",
    "forgets the punchline",
    "mocks the schedule",
    "shows a silly photo",
    "announces bad news",
    "repeats the same excuse",
];
const CUES: [&str; 10] = [
    "a tight smile",
    "a short breathy chuckle",
    "averted eyes",
    "a loud belly laugh",
    "a flat tone",
    "raised cheeks",
    "a shaky voice",
    "an eye roll",
    "a glance at the boss",
    "a long pause before laughing",
];

/// Deterministic template backend, pure in `(prompt, seed)`. It answers
/// task prompts with numbered task lines from five task families and
/// instance prompts with `Input:`/`Answer:`/`Category:` blocks that cycle
/// through the laughter categories.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockBackend;

fn prompt_rng(prompt: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

impl MockBackend {
    fn tasks(rng: &mut ChaCha8Rng) -> String {
        let mut s = String::new();
        for i in 0..12 {
            let family = FAMILIES.choose(rng).copied().unwrap_or("Analysis");
            let facet = FACETS.choose(rng).copied().unwrap_or("laugh intensity");
            let facet2 = FACETS.choose(rng).copied().unwrap_or("vocal tone");
            let verb = VERBS.choose(rng).copied().unwrap_or("Assess");
            let obj = OBJECTS.choose(rng).copied().unwrap_or("the role played by");
            let plural = if rng.random_bool(0.2) { "s" } else { "" };
            let _ = writeln!(
                s,
                "{}. {family} task{plural}: {verb} {obj} {facet} and {facet2} in scene {}.",
                i + 1,
                rng.random_range(0..1000)
            );
        }
        if rng.random_bool(0.1) {
            s.push_str("(that is all)\n");
        }
        s
    }

    fn instances(rng: &mut ChaCha8Rng, n: usize, relation: &str) -> String {
        let mut s = String::new();
        let offset = rng.random_range(0..CATEGORIES.len());
        for i in 0..n {
            let cat = CATEGORIES[(offset + i) % CATEGORIES.len()];
            let (a, b) = {
                let mut two: Vec<&str> = NAMES.choose_multiple(rng, 2).copied().collect();
                two.shuffle(rng);
                (two[0], two[1])
            };
            let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs.choose(rng).copied().unwrap_or_default();
            let setting = pick(rng, &SETTINGS);
            let trigger = pick(rng, &TRIGGERS);
            let cue = pick(rng, &CUES);
            let cue2 = pick(rng, &CUES);
            let react = pick(rng, &REACTIONS);
            let intensity = pick(rng, &["low", "moderate", "high"]);
            let count = rng.random_range(2..40);
            let input = match rng.random_range(0..4) {
                0 => format!("During {setting}, {a} laughs with {cue} after {b} {trigger}; {count} people are nearby."),
                1 => format!("{a} and {b} are {relation}. When {b} {trigger} at {setting}, {a} {react} with {cue}."),
                2 => format!("At {setting} {a} {react} as {b} {trigger}, showing {cue} and {cue2}."),
                _ => format!("{count} seconds after {b} {trigger}, {a} ({relation}) {react} with {cue} in {setting}."),
            };
            let _ = write!(
                s,
                "Input: {input}\nAnswer: {}, {intensity} intensity, because {a} reacts to {b} with {cue}.\nCategory: {cat}\n\n",
                title_case(cat),
            );
        }
        s
    }
}

impl GenerationBackend for MockBackend {
    fn generate(&self, prompt: &str, seed: u64) -> Result<String> {
        let mut rng = prompt_rng(prompt, seed);
        if prompt.starts_with(TASK_PROMPT_HEADER) {
            Ok(Self::tasks(&mut rng))
        } else if prompt.starts_with(INSTANCE_PROMPT_HEADER) {
            let n = prompt
                .lines()
                .rev()
                .find_map(|l| l.strip_prefix("Count: ")?.trim().parse().ok())
                .unwrap_or(10);
            let relation = prompt
                .lines()
                .find_map(|l| l.strip_prefix("Relation: "))
                .unwrap_or("friends")
                .trim();
            let mut text = Self::instances(&mut rng, n, relation);
            if rng.random_bool(0.1) {
                text.push_str("Input: (no answer given)\n\n");
            }
            Ok(text)
        } else {
            Ok(String::new())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfInstructConfig {
    pub seed: u64,
    /// Accepted instances to produce.
    pub target: usize,
    pub tasks_per_round: usize,
    pub instances_per_task: usize,
    pub dedup_threshold: f64,
    /// Rounds of task generation before giving up.
    pub max_rounds: usize,
}

impl Default for SelfInstructConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            target: DEFAULT_TARGET,
            tasks_per_round: 8,
            instances_per_task: 20,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            max_rounds: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfInstructOutput {
    pub tasks: Vec<InstructTask>,
    pub instances: Vec<InstructInstance>,
    pub task_rejected: usize,
    pub instance_rejected: usize,
    pub malformed: usize,
    pub report: TaskReport,
}

/// Grow the task pool and collect instances until `config.target` are
/// accepted. Task instructions are deduplicated against the task pool and
/// instance inputs against every input accepted so far.
pub fn run_pipeline(backend: &dyn GenerationBackend, config: &SelfInstructConfig) -> Result<SelfInstructOutput> {
    if config.tasks_per_round == 0 || config.instances_per_task == 0 {
        return Err(Error::validation("SelfInstructConfig", "tasks_per_round and instances_per_task must be positive"));
    }
    let mut pool = seed_tasks();
    let mut instances: Vec<InstructInstance> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    let (mut task_rejected, mut instance_rejected, mut malformed) = (0, 0, 0);
    let mut round = 0;
    while instances.len() < config.target {
        if round == config.max_rounds {
            return Err(Error::Degenerate(format!(
                "only {} of {} instances after {round} rounds",
                instances.len(),
                config.target
            )));
        }
        let round_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(round as u64);
        round += 1;
        let gen = generate_tasks(backend, &pool, config.tasks_per_round, round_seed, config.dedup_threshold)?;
        task_rejected += gen.rejected;
        malformed += gen.unparseable;
        for (k, task) in gen.tasks.into_iter().enumerate() {
            let (cands, bad) =
                generate_instances(backend, &task, config.instances_per_task, round_seed ^ ((k as u64 + 1) << 32))?;
            malformed += bad;
            for inst in cands {
                if instances.len() == config.target {
                    break;
                }
                if dedup(&inst.input, seen.iter().map(String::as_str), config.dedup_threshold)? {
                    seen.push(inst.input.clone());
                    instances.push(inst);
                } else {
                    instance_rejected += 1;
                }
            }
            pool.push(task);
        }
    }
    let generated: Vec<InstructTask> = pool.into_iter().filter(|t| t.origin == Origin::Generated).collect();
    let report = task_report(instances.iter().map(|i| i.task.as_str()), task_rejected + instance_rejected);
    Ok(SelfInstructOutput {
        tasks: generated,
        instances,
        task_rejected,
        instance_rejected,
        malformed,
        report,
    })
}
