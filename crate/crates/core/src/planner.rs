//! Build planning: environment definition to ordered build steps, container
//! recipe text, and content-addressed image references.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PlannerConfig;
use crate::digest::Sha256Digest;
use crate::project::EnvironmentSpec;

/// Mandatory first line of every recipe.
pub const DIGEST_HEADER: &str = "# rrp-spec-digest: ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("unsupported runtime {0:?}")]
    UnsupportedRuntime(String),
    #[error("conflicting inputs: {0}")]
    ConflictingInputs(String),
    #[error("project name is empty")]
    EmptyName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Installer {
    Pip,
    Conda,
    R,
    Julia,
}

impl Installer {
    fn file_name(self) -> &'static str {
        match self {
            Installer::Pip => "requirements.txt",
            Installer::Conda => "environment.yml",
            Installer::R => "install.R",
            Installer::Julia => "Project.toml",
        }
    }
}

/// Step kinds in plan order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "installer")]
pub enum StepKind {
    BaseImage,
    SystemPackages,
    RuntimeInstall,
    PackageInstall(Installer),
    CopyProject,
    PostBuild,
    Entrypoint,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepKind::PackageInstall(i) => write!(f, "PackageInstall({})", format!("{i:?}").to_lowercase()),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BuildStep {
    pub kind: StepKind,
    /// Canonical, normalized text of the step's input.
    pub payload: String,
    /// Repository-relative path of the file the step reads from the build context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BuildPlan {
    pub steps: Vec<BuildStep>,
    pub spec_digest: Sha256Digest,
    pub base_image: String,
}

impl BuildPlan {
    pub fn kinds(&self) -> Vec<StepKind> {
        self.steps.iter().map(|s| s.kind).collect()
    }

    pub fn step(&self, kind: StepKind) -> Option<&BuildStep> {
        self.steps.iter().find(|s| s.kind == kind)
    }
}

/// Rendered container build file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecipeText(pub String);

impl RecipeText {
    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    /// The digest recorded in the header line.
    pub fn spec_digest(&self) -> Option<Sha256Digest> {
        self.0.lines().next()?.strip_prefix(DIGEST_HEADER).and_then(Sha256Digest::parse)
    }

    /// Number of step blocks.
    pub fn step_count(&self) -> usize {
        self.0.lines().filter(|l| l.starts_with("# step: ")).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub repository: String,
    pub tag: String,
}

impl ImageRef {
    /// Parses `repository:tag`.
    pub fn parse(s: &str) -> Option<Self> {
        let (repo, tag) = s.rsplit_once(':')?;
        (!repo.is_empty() && !tag.is_empty() && !tag.contains('/'))
            .then(|| Self { repository: repo.to_owned(), tag: tag.to_owned() })
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.repository, self.tag)
    }
}

fn trimmed_lines(text: &str) -> String {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("\n")
}

fn split_runtime(runtime: &str) -> Result<(String, String), PlanError> {
    let (eco, version) = runtime
        .split_once('-')
        .filter(|(e, v)| !e.is_empty() && !v.is_empty())
        .ok_or_else(|| PlanError::UnsupportedRuntime(runtime.to_owned()))?;
    Ok((eco.to_ascii_lowercase(), version.to_owned()))
}

/// The default interactive session: a notebook server on the configured port,
/// honouring `RRP_BASE_URL` for reverse-proxied sessions.
pub fn default_session_command(port: u16) -> String {
    format!(
        "jupyter lab --ip=0.0.0.0 --port={port} --no-browser --allow-root \
         --ServerApp.token='' --ServerApp.base_url=${{RRP_BASE_URL:-/}}"
    )
}

pub fn plan_build(env: &EnvironmentSpec, spec_digest: &Sha256Digest, cfg: &PlannerConfig) -> Result<BuildPlan, PlanError> {
    let pip = !env.pip_requirements.trim().is_empty();
    let conda = !env.conda_environment.trim().is_empty();
    if pip && conda {
        return Err(PlanError::ConflictingInputs(
            "both requirements.txt and environment.yml are populated".into(),
        ));
    }

    let runtime = env.runtime.as_deref().map(split_runtime).transpose()?;
    let base_image = match &runtime {
        Some((eco, version)) => {
            let entry = cfg
                .base_images
                .get(eco)
                .ok_or_else(|| PlanError::UnsupportedRuntime(env.runtime.clone().unwrap_or_default()))?;
            entry.image.replace("{version}", version)
        }
        None if conda => cfg.conda_base_image.clone(),
        None if !env.r_install_script.trim().is_empty() => default_for(cfg, "r")?,
        None if !env.julia_project.trim().is_empty() => default_for(cfg, "julia")?,
        None => default_for(cfg, "python")?,
    };

    let mut steps = vec![BuildStep { kind: StepKind::BaseImage, payload: base_image.clone(), source_path: None }];
    if !env.apt_packages.is_empty() {
        let mut pkgs = env.apt_packages.clone();
        pkgs.sort();
        pkgs.dedup();
        steps.push(BuildStep {
            kind: StepKind::SystemPackages,
            payload: pkgs.join(" "),
            source_path: env.source_path("apt.txt").map(str::to_owned),
        });
    }
    if let Some(rt) = env.runtime.as_deref() {
        steps.push(BuildStep {
            kind: StepKind::RuntimeInstall,
            payload: rt.trim().to_owned(),
            source_path: env.source_path("runtime.txt").map(str::to_owned),
        });
    }
    for (installer, text) in [
        (Installer::Pip, &env.pip_requirements),
        (Installer::Conda, &env.conda_environment),
        (Installer::R, &env.r_install_script),
        (Installer::Julia, &env.julia_project),
    ] {
        if !text.trim().is_empty() {
            steps.push(BuildStep {
                kind: StepKind::PackageInstall(installer),
                payload: trimmed_lines(text),
                source_path: env.source_path(installer.file_name()).map(str::to_owned),
            });
        }
    }
    steps.push(BuildStep { kind: StepKind::CopyProject, payload: "/project".into(), source_path: None });
    if !env.post_build.trim().is_empty() {
        steps.push(BuildStep {
            kind: StepKind::PostBuild,
            payload: trimmed_lines(&env.post_build),
            source_path: env.source_path("postBuild").map(str::to_owned),
        });
    }
    let entry = if env.start_command.trim().is_empty() {
        default_session_command(cfg.session_port)
    } else {
        trimmed_lines(&env.start_command)
    };
    steps.push(BuildStep {
        kind: StepKind::Entrypoint,
        payload: entry,
        source_path: env.source_path("start").map(str::to_owned),
    });

    Ok(BuildPlan { steps, spec_digest: spec_digest.clone(), base_image })
}

fn default_for(cfg: &PlannerConfig, eco: &str) -> Result<String, PlanError> {
    let entry = cfg.base_images.get(eco).ok_or_else(|| PlanError::UnsupportedRuntime(eco.to_owned()))?;
    Ok(entry.image.replace("{version}", &entry.default_version))
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

fn render_step(out: &mut String, step: &BuildStep, session_port: u16) {
    out.push_str("# step: ");
    out.push_str(&step.kind.to_string());
    out.push('\n');
    let src = step.source_path.as_deref();
    match step.kind {
        StepKind::BaseImage => {
            out.push_str(&format!("FROM {}\n", step.payload));
            out.push_str("USER root\n");
        }
        StepKind::SystemPackages => {
            out.push_str(&format!(
                "RUN apt-get update && apt-get install -y --no-install-recommends {} && rm -rf /var/lib/apt/lists/*\n",
                step.payload
            ));
        }
        StepKind::RuntimeInstall => {
            out.push_str(&format!("ENV RRP_RUNTIME={}\n", step.payload));
            let check = match step.payload.split_once('-').map(|(e, _)| e.to_ascii_lowercase()).as_deref() {
                Some("r") => "R --version",
                Some("julia") => "julia --version",
                _ => "python3 --version",
            };
            out.push_str(&format!("RUN {check}\n"));
        }
        StepKind::PackageInstall(installer) => {
            let file = installer.file_name();
            out.push_str(&format!("COPY {} /tmp/rrp/{file}\n", src.unwrap_or(file)));
            let run = match installer {
                Installer::Pip => "python3 -m pip install --no-cache-dir -r /tmp/rrp/requirements.txt".to_owned(),
                Installer::Conda => "conda env update -n base -f /tmp/rrp/environment.yml && conda clean -afy".to_owned(),
                Installer::R => "Rscript /tmp/rrp/install.R".to_owned(),
                Installer::Julia => "julia --project=/tmp/rrp -e 'using Pkg; Pkg.instantiate()'".to_owned(),
            };
            out.push_str(&format!("RUN {run}\n"));
        }
        StepKind::CopyProject => {
            out.push_str(&format!("COPY . {}\n", step.payload));
            out.push_str(&format!("WORKDIR {}\n", step.payload));
        }
        StepKind::PostBuild => {
            out.push_str(&format!("RUN sh /project/{}\n", src.unwrap_or("postBuild")));
        }
        StepKind::Entrypoint => {
            out.push_str(&format!("EXPOSE {session_port}\n"));
            out.push_str(&format!("CMD [\"/bin/sh\", \"-c\", {}]\n", json_string(&step.payload)));
        }
    }
}

/// Renders the plan as a container build file. Byte-deterministic.
pub fn render_recipe(plan: &BuildPlan, cfg: &PlannerConfig) -> RecipeText {
    let mut out = String::new();
    out.push_str(DIGEST_HEADER);
    out.push_str(plan.spec_digest.as_str());
    out.push('\n');
    for step in &plan.steps {
        out.push('\n');
        render_step(&mut out, step, cfg.session_port);
    }
    RecipeText(out)
}

/// Lowercase, non-alphanumerics mapped to hyphens, runs collapsed, ends trimmed.
pub fn slug(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_owned()
}

pub fn image_reference(project_name: &str, spec_digest: &Sha256Digest) -> Result<ImageRef, PlanError> {
    let s = slug(project_name);
    if s.is_empty() {
        return Err(PlanError::EmptyName);
    }
    Ok(ImageRef { repository: format!("rrp/{s}"), tag: spec_digest.short(12).to_owned() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Change {
    Added,
    Changed,
    Removed,
}

pub type ChangeSet = Vec<(StepKind, Change)>;

/// Step-wise structural difference from `a` to `b`, in step order.
pub fn plan_diff(a: &BuildPlan, b: &BuildPlan) -> ChangeSet {
    let left: BTreeMap<StepKind, &BuildStep> = a.steps.iter().map(|s| (s.kind, s)).collect();
    let right: BTreeMap<StepKind, &BuildStep> = b.steps.iter().map(|s| (s.kind, s)).collect();
    let mut kinds: Vec<StepKind> = left.keys().chain(right.keys()).copied().collect();
    kinds.sort();
    kinds.dedup();
    kinds
        .into_iter()
        .filter_map(|k| match (left.get(&k), right.get(&k)) {
            (Some(_), None) => Some((k, Change::Removed)),
            (None, Some(_)) => Some((k, Change::Added)),
            (Some(x), Some(y)) if x != y => Some((k, Change::Changed)),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::project::SourceFile;
    use proptest::prelude::*;

    fn digest(c: char) -> Sha256Digest {
        Sha256Digest::parse(&c.to_string().repeat(64)).unwrap()
    }

    fn env_runtime(rt: &str) -> EnvironmentSpec {
        EnvironmentSpec {
            runtime: Some(rt.into()),
            source_files: vec![SourceFile { path: ".binder/runtime.txt".into(), content_hash: "x".into() }],
            ..Default::default()
        }
    }

    #[test]
    fn runtime_only_plan() {
        let plan = plan_build(&env_runtime("python-3.10"), &digest('a'), &PlannerConfig::default()).unwrap();
        assert_eq!(
            plan.kinds(),
            vec![StepKind::BaseImage, StepKind::RuntimeInstall, StepKind::CopyProject, StepKind::Entrypoint]
        );
        assert_eq!(plan.base_image, "docker.io/library/python:3.10-slim-bookworm");
    }

    #[test]
    fn apt_payload_sorted_and_deduplicated() {
        let mut env = env_runtime("python-3.10");
        env.apt_packages = crate::project::parse_apt_list("zlib1g\ngit\ngit");
        let plan = plan_build(&env, &digest('a'), &PlannerConfig::default()).unwrap();
        assert_eq!(plan.step(StepKind::SystemPackages).unwrap().payload, "git zlib1g");
    }

    #[test]
    fn unsupported_runtime() {
        let err = plan_build(&env_runtime("fortran-77"), &digest('a'), &PlannerConfig::default()).unwrap_err();
        assert_eq!(err, PlanError::UnsupportedRuntime("fortran-77".into()));
        let err = plan_build(&env_runtime("python"), &digest('a'), &PlannerConfig::default()).unwrap_err();
        assert!(matches!(err, PlanError::UnsupportedRuntime(_)));
    }

    #[test]
    fn pip_and_conda_conflict() {
        let env = EnvironmentSpec {
            pip_requirements: "numpy\n".into(),
            conda_environment: "name: x\n".into(),
            ..Default::default()
        };
        assert!(matches!(plan_build(&env, &digest('a'), &PlannerConfig::default()), Err(PlanError::ConflictingInputs(_))));
    }

    #[test]
    fn full_plan_order_and_tracing() {
        let env = EnvironmentSpec {
            runtime: Some("r-4.2".into()),
            apt_packages: vec!["git".into()],
            r_install_script: "install.packages('x')\n".into(),
            julia_project: "[deps]\n".into(),
            pip_requirements: "numpy\n".into(),
            post_build: "echo done\n".into(),
            start_command: "exec \"$@\"\n".into(),
            ..Default::default()
        };
        let plan = plan_build(&env, &digest('b'), &PlannerConfig::default()).unwrap();
        assert_eq!(
            plan.kinds(),
            vec![
                StepKind::BaseImage,
                StepKind::SystemPackages,
                StepKind::RuntimeInstall,
                StepKind::PackageInstall(Installer::Pip),
                StepKind::PackageInstall(Installer::R),
                StepKind::PackageInstall(Installer::Julia),
                StepKind::CopyProject,
                StepKind::PostBuild,
                StepKind::Entrypoint,
            ]
        );
        assert_eq!(plan.base_image, "docker.io/rocker/r-ver:4.2");
        assert_eq!(plan.step(StepKind::Entrypoint).unwrap().payload, "exec \"$@\"");
        let mut sorted = plan.kinds();
        sorted.sort();
        assert_eq!(sorted, plan.kinds());
    }

    #[test]
    fn default_entrypoint_is_notebook_on_8888() {
        let plan = plan_build(&env_runtime("python-3.10"), &digest('a'), &PlannerConfig::default()).unwrap();
        let entry = &plan.step(StepKind::Entrypoint).unwrap().payload;
        assert!(entry.starts_with("jupyter lab"));
        assert!(entry.contains("--port=8888"));
    }

    #[test]
    fn base_image_without_runtime_follows_inputs() {
        let cfg = PlannerConfig::default();
        let conda = EnvironmentSpec { conda_environment: "name: x".into(), ..Default::default() };
        assert_eq!(plan_build(&conda, &digest('a'), &cfg).unwrap().base_image, cfg.conda_base_image);
        let apt = EnvironmentSpec { apt_packages: vec!["git".into()], ..Default::default() };
        assert_eq!(plan_build(&apt, &digest('a'), &cfg).unwrap().base_image, "docker.io/library/python:3.11-slim-bookworm");
    }

    #[test]
    fn render_is_deterministic_and_has_header() {
        let cfg = PlannerConfig::default();
        let plan = plan_build(&env_runtime("python-3.10"), &digest('c'), &cfg).unwrap();
        let a = render_recipe(&plan, &cfg);
        let b = render_recipe(&plan, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.spec_digest(), Some(digest('c')));
        assert!(a.0.starts_with(&format!("{DIGEST_HEADER}{}\n", "c".repeat(64))));
        assert_eq!(a.step_count(), plan.steps.len());
    }

    #[test]
    fn recipes_differ_only_in_changed_block() {
        let cfg = PlannerConfig::default();
        let mut env = env_runtime("python-3.10");
        env.apt_packages = vec!["git".into()];
        let p1 = plan_build(&env, &digest('a'), &cfg).unwrap();
        env.apt_packages.push("zlib1g".into());
        let p2 = plan_build(&env, &digest('a'), &cfg).unwrap();
        let r1 = render_recipe(&p1, &cfg).0;
        let r2 = render_recipe(&p2, &cfg).0;
        let blocks = |r: &str| r.split("\n# step: ").map(str::to_owned).collect::<Vec<_>>();
        let (b1, b2) = (blocks(&r1), blocks(&r2));
        assert_eq!(b1.len(), b2.len());
        let differing: Vec<_> = b1.iter().zip(&b2).filter(|(x, y)| x != y).map(|(x, _)| x.lines().next().unwrap().to_owned()).collect();
        assert_eq!(differing, vec!["SystemPackages".to_owned()]);
    }

    #[test]
    fn image_reference_slugging() {
        let d = digest('d');
        let r = image_reference("Demo Project", &d).unwrap();
        assert_eq!(r.repository, "rrp/demo-project");
        assert_eq!(r.tag, "d".repeat(12));
        assert_eq!(image_reference("  Weird__Name!!v2 ", &d).unwrap().repository, "rrp/weird-name-v2");
        assert_eq!(image_reference("", &d).unwrap_err(), PlanError::EmptyName);
        assert_eq!(image_reference("!!!", &d).unwrap_err(), PlanError::EmptyName);
        assert_ne!(image_reference("demo", &digest('1')).unwrap().tag, image_reference("demo", &digest('2')).unwrap().tag);
    }

    #[test]
    fn image_ref_parse_round_trip() {
        let r = ImageRef { repository: "registry:5000/rrp/demo".into(), tag: "abc".into() };
        assert_eq!(ImageRef::parse(&r.to_string()), Some(r));
        assert_eq!(ImageRef::parse("registry:5000/rrp/demo"), None);
    }

    #[test]
    fn diff_cases() {
        let cfg = PlannerConfig::default();
        let mut env = env_runtime("python-3.10");
        env.apt_packages = vec!["git".into()];
        env.post_build = "echo hi".into();
        let p = plan_build(&env, &digest('a'), &cfg).unwrap();
        assert!(plan_diff(&p, &p).is_empty());

        let mut env2 = env.clone();
        env2.apt_packages.push("curl".into());
        let p2 = plan_build(&env2, &digest('a'), &cfg).unwrap();
        assert_eq!(plan_diff(&p, &p2), vec![(StepKind::SystemPackages, Change::Changed)]);

        let mut env3 = env.clone();
        env3.post_build.clear();
        let p3 = plan_build(&env3, &digest('a'), &cfg).unwrap();
        assert_eq!(plan_diff(&p, &p3), vec![(StepKind::PostBuild, Change::Removed)]);
        assert_eq!(plan_diff(&p3, &p), vec![(StepKind::PostBuild, Change::Added)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn every_input_appears_in_exactly_one_step(
            apt in prop::collection::vec("[a-z]{1,6}", 0..4),
            pip in prop::option::of("[a-z]{1,6}"),
            r in prop::option::of("[a-z]{1,6}"),
            post in prop::option::of("[a-z]{1,6}"),
        ) {
            let env = EnvironmentSpec {
                runtime: Some("python-3.10".into()),
                apt_packages: apt.iter().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect(),
                pip_requirements: pip.clone().unwrap_or_default(),
                r_install_script: r.clone().unwrap_or_default(),
                post_build: post.clone().unwrap_or_default(),
                ..Default::default()
            };
            let plan = plan_build(&env, &digest('e'), &PlannerConfig::default()).unwrap();
            let count = |k: StepKind| plan.steps.iter().filter(|s| s.kind == k).count();
            prop_assert_eq!(count(StepKind::SystemPackages), usize::from(!apt.is_empty()));
            prop_assert_eq!(count(StepKind::PackageInstall(Installer::Pip)), usize::from(pip.is_some()));
            prop_assert_eq!(count(StepKind::PackageInstall(Installer::R)), usize::from(r.is_some()));
            prop_assert_eq!(count(StepKind::PostBuild), usize::from(post.is_some()));
            prop_assert_eq!(count(StepKind::BaseImage), 1);
            prop_assert_eq!(plan.steps.first().unwrap().kind, StepKind::BaseImage);
            prop_assert_eq!(plan.steps.last().unwrap().kind, StepKind::Entrypoint);
        }
    }
}
