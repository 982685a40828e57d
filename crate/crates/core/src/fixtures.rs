//! Bundled fixtures: three server models with data, configurations and
//! trace tuples, the two case-study changes, seeded change injection, a
//! generator of programs with known final checks, and access-log builders.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::acdl::AcConfig;
use crate::datastate::{DataState, FileEntry, OverlayStore, Perms, Row};
use crate::hir::{IrProgram, RunOptions};
use crate::impact::{ChangeSpec, DataChange};
use crate::reqgen::{synthesize, Action, ObjectSource, Request, Scope, Subject, SubjectSource, SynthesisSpec};
use crate::trimmer::TraceTuple;

pub const STATIC_SITE_IR: &str = include_str!("../fixtures/static_site.hir");
pub const PROXY_IR: &str = include_str!("../fixtures/proxy.hir");
pub const APP_IR: &str = include_str!("../fixtures/app.hir");
pub const STATIC_HANDLER_IR: &str = include_str!("../fixtures/static_handler.hir");

/// How [`Scenario::inject_change`] flips resources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeKind {
    /// Half of the flips are new config blocks, half are chmods.
    ConfigAndChmod,
    /// Per-object source-address restrictions.
    IpBlocks,
    /// Per-page application permission blocks.
    AppConfig,
}

/// A server model with everything needed to test changes against it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub program: IrProgram,
    pub lower: Arc<DataState>,
    pub config: AcConfig,
    pub spec: SynthesisSpec,
    /// GET-only tuples that make the program's checks diverge.
    pub tuples: Vec<TraceTuple>,
    pub change_kind: ChangeKind,
}

impl Scenario {
    pub fn store(&self) -> OverlayStore {
        OverlayStore::new(Arc::clone(&self.lower))
    }

    pub fn objects(&self) -> Vec<String> {
        self.lower.files.keys().cloned().collect()
    }

    /// The full subject × object × action × IP product.
    pub fn corpus(&self) -> Vec<Request> {
        synthesize(&self.spec, &self.store(), None).expect("fixture sources are non-empty")
    }

    /// The baseline configuration followed by `extra` blocks.
    pub fn config_with(&self, extra: &str) -> AcConfig {
        AcConfig::parse(&format!("{}\n{extra}", self.config)).expect("fixture config parses")
    }

    /// A change that flips 10% of the data objects (rounded up), chosen
    /// by `seed`.
    pub fn inject_change(&self, seed: u64) -> ChangeSpec {
        let objects = self.objects();
        let n = objects.len().div_ceil(10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, objects.len(), n).into_vec();
        picked.sort_unstable();
        let mut extra = String::new();
        let mut delta = Vec::new();
        for (k, &i) in picked.iter().enumerate() {
            let path = &objects[i];
            let pat = format!("^{}$", regex::escape(path));
            match self.change_kind {
                ChangeKind::ConfigAndChmod if k % 2 == 1 => {
                    let perms = self.lower.files[path].perms.bits();
                    let flipped = if perms & 0o044 != 0 { perms & !0o044 } else { perms | 0o044 };
                    delta.push(DataChange::Chmod {
                        path: path.clone(),
                        perms: Perms::new(flipped).expect("valid bits"),
                    });
                }
                ChangeKind::ConfigAndChmod => {
                    let rule = if path.starts_with("/private/") { "allow from all" } else { "deny from all" };
                    let _ = writeln!(extra, "files \"{pat}\" {{ {rule} }}");
                }
                ChangeKind::IpBlocks => {
                    let rules = if path.starts_with("/admin/") {
                        "allow from all"
                    } else {
                        "deny from all; allow from 10.0.0.0/8"
                    };
                    let _ = writeln!(extra, "files \"{pat}\" {{ {rules} }}");
                }
                ChangeKind::AppConfig => {
                    let rules = if path.starts_with("/wiki/Restricted/") {
                        "allow from all"
                    } else {
                        "deny from all; allow group admins"
                    };
                    let _ = writeln!(extra, "files \"{pat}\" {{ {rules} }}");
                }
            }
        }
        ChangeSpec::new(self.config.clone(), self.config_with(&extra), delta).expect("fixture paths are valid")
    }
}

fn user_row(name: &str, groups: &str) -> Row {
    let v = json!({ "name": name, "groups": groups });
    serde_json::from_value(v).expect("row is an object")
}

fn get(subject: Subject, object: &str, ip: &str) -> Request {
    Request::new(subject, object, Action::Get, ip.parse().expect("fixture ip")).expect("fixture path")
}

fn table_spec(objects_root: &str, actions: Vec<Action>, ips: Vec<Ipv4Addr>) -> SynthesisSpec {
    SynthesisSpec {
        subjects: SubjectSource::Table {
            table: "users".into(),
            include_anonymous: true,
        },
        objects: ObjectSource::Root {
            root: objects_root.into(),
        },
        actions,
        ips,
        scope: Scope::All,
    }
}

fn ip(s: &str) -> Ipv4Addr {
    s.parse().expect("fixture ip")
}

pub const STATIC_SITE_CONFIG: &str = r#"
location /private {
    deny from all
    allow group staff
}
location /course {
    deny from all
    allow from 10.1.0.0/16
}
location /downloads {
    allow from all
    deny method PUT
}
"#;

/// Static file server: 120 files, 4 subjects, 4 actions, 2 source IPs
/// (3840 requests). Config checks run in the entry handler, permission
/// checks in the sub-handlers. Tuples only use GET, so the write-side
/// check is never executed while tracing.
pub fn static_site() -> Scenario {
    let mut d = DataState::default();
    let dirs = [("docs", 30), ("images", 30), ("private", 20), ("downloads", 25), ("course", 15)];
    for (dir, count) in dirs {
        for i in 0..count {
            let (name, perms) = match dir {
                "docs" => (format!("page{i:02}.html"), 0o644),
                "images" => (format!("img{i:02}.png"), if i % 10 == 9 { 0o640 } else { 0o644 }),
                "private" => (format!("report{i:02}.pdf"), 0o640),
                "downloads" => (format!("pkg{i:02}.tar.gz"), 0o644),
                _ => (format!("lecture{i:02}.pdf"), if i % 5 == 4 { 0o600 } else { 0o644 }),
            };
            d.insert_file(&format!("/{dir}/{name}"), FileEntry::new("www", "staff", perms, 4096))
                .expect("fixture path");
        }
    }
    d.tables.insert(
        "users".into(),
        vec![user_row("alice", "staff"), user_row("bob", "students"), user_row("www", "staff,www")],
    );
    let program = IrProgram::parse(STATIC_SITE_IR).expect("fixture program parses");
    let config = AcConfig::parse(STATIC_SITE_CONFIG).expect("fixture config parses");
    let mut s = Scenario {
        name: "static-site",
        program,
        lower: Arc::new(d),
        config,
        spec: table_spec(
            "/",
            vec![Action::Get, Action::Put, Action::Delete, Action::Trace],
            vec![ip("10.1.0.7"), ip("203.0.113.7")],
        ),
        tuples: vec![],
        change_kind: ChangeKind::ConfigAndChmod,
    };
    let alice = Subject::user("alice", ["staff"]);
    let bob = Subject::user("bob", ["students"]);
    s.tuples = vec![
        TraceTuple {
            request: get(Subject::anonymous(), "/docs/page00.html", "203.0.113.7"),
            cfg_allow: s.config.clone(),
            cfg_deny: s.config_with("location /docs { deny from all }"),
        },
        TraceTuple {
            request: get(alice, "/private/report03.pdf", "10.1.0.7"),
            cfg_allow: s.config.clone(),
            cfg_deny: s.config_with("location /private { deny group staff }"),
        },
        TraceTuple {
            request: get(bob, "/course/lecture00.pdf", "10.1.0.7"),
            cfg_allow: s.config.clone(),
            cfg_deny: s.config_with("location /course { deny from all }"),
        },
    ];
    s
}

pub const PROXY_CONFIG: &str = r#"
location /admin {
    deny from all
    allow from 10.0.0.0/8
}
location /api {
    allow from all
    deny from 192.168.1.0/24
}
"#;

/// Reverse proxy with every check in the entry handler: 120 upstream
/// paths, 3 subjects, 3 actions, 3 source IPs (3240 requests).
pub fn proxy() -> Scenario {
    let mut d = DataState::default();
    for (dir, count) in [("api", 60), ("static", 40), ("admin", 20)] {
        for i in 0..count {
            d.insert_file(&format!("/{dir}/r{i:03}"), FileEntry::new("nginx", "nginx", 0o644, 1))
                .expect("fixture path");
        }
    }
    d.tables.insert("users".into(), vec![user_row("alice", "ops"), user_row("bob", "")]);
    let program = IrProgram::parse(PROXY_IR).expect("fixture program parses");
    let config = AcConfig::parse(PROXY_CONFIG).expect("fixture config parses");
    let mut s = Scenario {
        name: "proxy",
        program,
        lower: Arc::new(d),
        config,
        spec: table_spec(
            "/",
            vec![Action::Get, Action::Post, Action::Delete],
            vec![ip("10.0.0.1"), ip("192.168.1.1"), ip("203.0.113.7")],
        ),
        tuples: vec![],
        change_kind: ChangeKind::IpBlocks,
    };
    s.tuples = vec![TraceTuple {
        request: get(Subject::anonymous(), "/api/r000", "10.0.0.1"),
        cfg_allow: s.config.clone(),
        cfg_deny: s.config_with("location /api { deny from all }"),
    }];
    s
}

pub const APP_CONFIG: &str = r#"
location /wiki {
    deny method EDIT
    allow group editors
}
location /wiki/Restricted {
    deny from all
    allow group admins
}
"#;

/// Wiki-style application whose checks all live in the page handlers:
/// 120 pages, 4 subjects, 3 actions, 1 source IP (1440 requests).
pub fn app() -> Scenario {
    let mut d = DataState::default();
    for i in 0..100 {
        d.insert_file(&format!("/wiki/Page_{i:03}"), FileEntry::new("www", "www", 0o644, 1))
            .expect("fixture path");
    }
    for i in 0..10 {
        d.insert_file(&format!("/wiki/Restricted/Secret_{i:02}"), FileEntry::new("www", "www", 0o644, 1))
            .expect("fixture path");
        d.insert_file(&format!("/wiki/Help/Topic_{i:02}"), FileEntry::new("www", "www", 0o644, 1))
            .expect("fixture path");
    }
    d.tables.insert(
        "users".into(),
        vec![user_row("alice", "editors"), user_row("bob", "readers"), user_row("carol", "admins,editors")],
    );
    d.tables.insert(
        "editors".into(),
        vec![user_row("alice", ""), user_row("carol", "")],
    );
    let program = IrProgram::parse(APP_IR).expect("fixture program parses");
    let config = AcConfig::parse(APP_CONFIG).expect("fixture config parses");
    let mut s = Scenario {
        name: "app",
        program,
        lower: Arc::new(d),
        config,
        spec: table_spec("/", vec![Action::Get, Action::Post, Action::Edit], vec![ip("10.0.0.1")]),
        tuples: vec![],
        change_kind: ChangeKind::AppConfig,
    };
    let alice = Subject::user("alice", ["editors"]);
    s.tuples = vec![
        TraceTuple {
            request: get(Subject::anonymous(), "/wiki/Page_000", "10.0.0.1"),
            cfg_allow: s.config.clone(),
            cfg_deny: s.config_with("location /wiki { deny from all }"),
        },
        TraceTuple {
            request: Request::new(alice, "/wiki/Page_001", Action::Edit, ip("10.0.0.1")).expect("fixture path"),
            cfg_allow: s.config.clone(),
            cfg_deny: s.config_with("location /wiki { deny from all }"),
        },
    ];
    s
}

/// The app fixture's injected change plus a new restricted page.
pub fn app_change_with_new_page(s: &Scenario, seed: u64) -> ChangeSpec {
    let mut change = s.inject_change(seed);
    change.data_delta.push(DataChange::AddFile {
        path: "/wiki/Restricted/New_Secret".into(),
        entry: FileEntry::new("www", "www", 0o644, 1),
    });
    change
}

/// Static handler whose task check consults the configuration, so the
/// allow/deny pair diverges inside the sub-handler.
pub fn static_handler() -> Scenario {
    let mut d = DataState::default();
    for p in ["/index.html", "/about.html", "/css/site.css"] {
        d.insert_file(p, FileEntry::new("www", "www", 0o644, 100)).expect("fixture path");
    }
    d.tables.insert("users".into(), vec![user_row("alice", "staff")]);
    let program = IrProgram::parse(STATIC_HANDLER_IR).expect("fixture program parses");
    let mut s = Scenario {
        name: "static-handler",
        program,
        lower: Arc::new(d),
        config: AcConfig::default(),
        spec: table_spec("/", vec![Action::Get, Action::Put], vec![ip("10.0.0.5")]),
        tuples: vec![],
        change_kind: ChangeKind::ConfigAndChmod,
    };
    s.tuples = vec![TraceTuple {
        request: get(Subject::anonymous(), "/index.html", "10.0.0.5"),
        cfg_allow: s.config.clone(),
        cfg_deny: AcConfig::parse("root { deny from all }").expect("fixture config parses"),
    }];
    s
}

/// One of the case-study changes, ready to run.
#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub program: IrProgram,
    pub lower: Arc<DataState>,
    pub change: ChangeSpec,
    pub requests: Vec<Request>,
}

fn case_requests(lower: &Arc<DataState>, change: &ChangeSpec) -> Vec<Request> {
    let spec = SynthesisSpec {
        subjects: SubjectSource::Inline {
            inline: vec![Subject::anonymous()],
        },
        objects: ObjectSource::Root { root: "/".into() },
        actions: vec![Action::Get],
        ips: vec![ip("198.51.100.20")],
        scope: Scope::All,
    };
    synthesize(&spec, &OverlayStore::new(Arc::clone(lower)), Some(change)).expect("case sources are non-empty")
}

pub const MEDIAWIKI_CONFIG: &str = r#"
location /cache { deny from all }
location /maintenance { deny from all }
files "^\.ht" { deny from all }
"#;

/// A third-party extension installs test tooling, including
/// `eval-stdin.php`, that no rule covers.
pub fn extension_install() -> CaseStudy {
    let mut d = DataState::default();
    for p in [
        "/index.php",
        "/api.php",
        "/load.php",
        "/.htaccess",
        "/cache/l10n_cache-en.cdb",
        "/maintenance/update.php",
        "/skins/Vector/skin.json",
    ] {
        d.insert_file(p, FileEntry::new("www-data", "www-data", 0o644, 1)).expect("fixture path");
    }
    let ext = "/extensions/MW-OAuth2Client";
    let added = [
        "extension.json",
        "vendor/autoload.php",
        "vendor/phpunit/phpunit/src/Util/PHP/eval-stdin.php",
    ];
    let delta = added
        .iter()
        .map(|p| DataChange::AddFile {
            path: format!("{ext}/{p}"),
            entry: FileEntry::new("www-data", "www-data", 0o644, 1),
        })
        .collect();
    let config = AcConfig::parse(MEDIAWIKI_CONFIG).expect("fixture config parses");
    let lower = Arc::new(d);
    let change = ChangeSpec::new(config.clone(), config, delta).expect("fixture paths are valid");
    CaseStudy {
        program: IrProgram::parse(STATIC_SITE_IR).expect("fixture program parses"),
        requests: case_requests(&lower, &change),
        lower,
        change,
    }
}

pub const DRUPAL_CONFIG: &str = r#"
location /sites/default/private { deny from all }
files "\.(engine|inc|install|module|profile|po|sh|theme|twig|yml)$" { deny from all }
"#;

/// Database dumps are added along with a rule meant to hide them; the
/// rule matches `.sql` but not `.sql.gz`.
pub fn sql_dump() -> CaseStudy {
    let mut d = DataState::default();
    for p in [
        "/index.php",
        "/core/install.php",
        "/core/modules/system/system.module",
        "/sites/default/settings.php",
        "/sites/default/private/backup.tar",
        "/robots.txt",
    ] {
        d.insert_file(p, FileEntry::new("www-data", "www-data", 0o644, 1)).expect("fixture path");
    }
    let delta = ["/vov_500.sql", "/db/light.sql.gz"]
        .iter()
        .map(|p| DataChange::AddFile {
            path: p.to_string(),
            entry: FileEntry::new("www-data", "www-data", 0o644, 1),
        })
        .collect();
    let old = AcConfig::parse(DRUPAL_CONFIG).expect("fixture config parses");
    let new = AcConfig::parse(&format!("{DRUPAL_CONFIG}\nfiles \"\\.sql$\" {{ deny from all }}"))
        .expect("fixture config parses");
    let lower = Arc::new(d);
    let change = ChangeSpec::new(old, new, delta).expect("fixture paths are valid");
    CaseStudy {
        program: IrProgram::parse(STATIC_SITE_IR).expect("fixture program parses"),
        requests: case_requests(&lower, &change),
        lower,
        change,
    }
}

/// A generated program with one real access-control check and a few
/// nondeterministic diamonds that also make the two runs diverge.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub program: IrProgram,
    pub lower: Arc<DataState>,
    pub tuple: TraceTuple,
    pub allow_opts: RunOptions,
    pub deny_opts: RunOptions,
    /// The check CFG-diff must report.
    pub expected_check: String,
    pub diamonds: usize,
}

/// Builds a synthetic CFG-diff case. Each diamond has sides of one or two
/// blocks and the two runs take opposite sides of every diamond; the
/// check's allow branch is at least four blocks long.
pub fn synthetic_case(seed: u64) -> SyntheticCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diamonds = rng.gen_range(1..=3usize);
    let in_sub = rng.gen_bool(0.5);
    let decoy = rng.gen_bool(0.5);
    let chain = rng.gen_range(4..=7usize);
    let gate_fn = if in_sub { "handler" } else { "main" };

    let mut main = String::from("fn main entry -> status {\nstart:\n    io 1 read /etc/app.conf\n");
    if decoy {
        main.push_str("    check verb method_is(GET) via method_check -> verb_status ? d0 : bad_verb\n");
        main.push_str("bad_verb:\n    log result(verb)\n    return 405\n");
    } else {
        main.push_str("    goto d0\n");
    }
    let after_diamonds = if in_sub { "dispatch" } else { "gate" };
    for k in 0..diamonds {
        let next = if k + 1 == diamonds { after_diamonds.to_string() } else { format!("d{}", k + 1) };
        let _ = writeln!(main, "d{k}:\n    branch nondet({k}) ? d{k}_a0 : d{k}_b0");
        for side in ["a", "b"] {
            let len = rng.gen_range(1..=2usize);
            for j in 0..len {
                let target = if j + 1 == len { next.clone() } else { format!("d{k}_{side}{}", j + 1) };
                let _ = writeln!(main, "d{k}_{side}{j}:\n    io 1 read object\n    goto {target}");
            }
        }
    }
    let mut gate = String::new();
    let _ = writeln!(gate, "gate:\n    check acc directive_match via gate_check ? ok0 : denied");
    for i in 0..chain {
        if i + 1 == chain {
            let _ = writeln!(gate, "ok{i}:\n    log result(acc)\n    io 10 read object\n    return 200");
        } else {
            let _ = writeln!(gate, "ok{i}:\n    io 1 read object\n    goto ok{}", i + 1);
        }
    }
    gate.push_str("denied:\n    log result(acc)\n    return 403\n");
    let text = if in_sub {
        format!("{main}dispatch:\n    call handler\n    return $\n}}\n\nfn handler sub -> status {{\n{gate}}}\n")
    } else {
        format!("{main}{gate}}}\n")
    };
    let program = IrProgram::parse(&text).expect("generated program parses");
    debug_assert!(program.function(gate_fn).is_some());

    let mut d = DataState::default();
    d.insert_file("/index.html", FileEntry::new("www", "www", 0o644, 1)).expect("fixture path");
    let mask = (1u64 << diamonds) - 1;
    let allow_entropy = rng.gen::<u64>() & mask;
    SyntheticCase {
        program,
        lower: Arc::new(d),
        tuple: TraceTuple {
            request: get(Subject::anonymous(), "/index.html", "10.0.0.1"),
            cfg_allow: AcConfig::default(),
            cfg_deny: AcConfig::parse("root { deny from all }").expect("fixture config parses"),
        },
        allow_opts: RunOptions {
            entropy: allow_entropy,
            ..RunOptions::default()
        },
        deny_opts: RunOptions {
            entropy: allow_entropy ^ mask,
            ..RunOptions::default()
        },
        expected_check: "acc".into(),
        diamonds,
    }
}

/// A seeded subset of `objects` standing in for what access logs cover.
///
/// Objects listed in `weights` are added in shuffled order while their
/// total weight stays within `fraction` of the overall weight; the rest
/// fill up to `fraction` of all objects, rounded down.
pub fn coverage_sample(
    objects: &[String],
    weights: &BTreeMap<String, usize>,
    fraction: f64,
    seed: u64,
) -> BTreeSet<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weighted: Vec<&String> = objects.iter().filter(|o| weights.contains_key(*o)).collect();
    weighted.shuffle(&mut rng);
    let budget = (weights.values().sum::<usize>() as f64 * fraction).floor() as usize;
    let mut used = 0;
    let mut out = BTreeSet::new();
    let cap = (objects.len() as f64 * fraction).floor() as usize;
    for o in weighted {
        if out.len() < cap && used + weights[o] <= budget {
            used += weights[o];
            out.insert(o.clone());
        }
    }
    let rest: Vec<&String> = objects.iter().filter(|o| !weights.contains_key(*o)).collect();
    let n = (cap - out.len()).min(rest.len());
    out.extend(sample(&mut rng, rest.len(), n).into_iter().map(|i| rest[i].clone()));
    out
}

/// Access-log lines for every request whose object is in `covered`, plus
/// one malformed line.
pub fn access_log(requests: &[Request], covered: &BTreeSet<String>) -> Vec<String> {
    let mut lines = vec!["-- log rotated --".to_string()];
    for (i, r) in requests.iter().filter(|r| covered.contains(&r.object)).enumerate() {
        let user = r.subject.name().unwrap_or("-");
        lines.push(format!(
            "{} {user} [10/Oct/2023:13:{:02}:{:02} +0000] \"{} {} HTTP/1.1\" 200 512",
            r.source_ip,
            (i / 60) % 60,
            i % 60,
            r.action,
            r.object
        ));
    }
    lines
}
