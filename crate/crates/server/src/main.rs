use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use exact_core::*;
use exact_server::{api::DEFAULT_EXPORT_TEMPLATE, dto::ImageDto, AppState, Config, Overrides};

#[derive(Parser)]
#[command(name = "exact", version, about = "Collaborative gigapixel image annotation server")]
struct Cli {
    /// TOML config file [env: EXACT_CONFIG]
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Storage directory [env: EXACT_STORAGE_ROOT]
    #[arg(long, global = true)]
    storage_root: Option<PathBuf>,
    /// Journal file [env: EXACT_DB_PATH]
    #[arg(long, global = true)]
    db_path: Option<PathBuf>,
    /// Listen address [env: EXACT_BIND]
    #[arg(long, global = true)]
    bind: Option<String>,
    /// Public URL of this instance [env: EXACT_BASE_URL]
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP server.
    Serve,
    /// Upload every decodable image below a directory.
    Ingest {
        dir: PathBuf,
        #[arg(long)]
        set: u64,
    },
    /// Render annotations of an image set, one line each.
    Export {
        #[arg(long)]
        set: u64,
        #[arg(long)]
        version: Option<u64>,
        #[arg(long, default_value = DEFAULT_EXPORT_TEMPLATE)]
        template: String,
        /// Write to this file instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Freeze the current state of an image set.
    VersionCreate {
        #[arg(long)]
        set: u64,
        #[arg(long)]
        name: String,
        #[arg(long)]
        description: Option<String>,
    },
    UserAdd {
        username: String,
        #[arg(long, env = "EXACT_PASSWORD", hide_env_values = true)]
        password: String,
        #[arg(long)]
        admin: bool,
    },
    /// Create a team. Members are given as `name` (all rights) or
    /// `name:read,create,...`.
    TeamAdd {
        name: String,
        #[arg(long = "member")]
        members: Vec<String>,
    },
    /// Create an image set.
    SetAdd {
        name: String,
        #[arg(long)]
        team: u64,
        #[arg(long = "virtual")]
        is_virtual: bool,
        #[arg(long = "product")]
        products: Vec<u64>,
    },
    /// Print a fresh API token for a user.
    Token { username: String },
}

enum Failure {
    Config(String),
    Failed(String),
    Partial,
}

impl From<exact_core::Error> for Failure {
    fn from(e: exact_core::Error) -> Self {
        Failure::Failed(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let flags = Overrides {
        config: cli.config.clone(),
        storage_root: cli.storage_root.clone(),
        bind: cli.bind.clone(),
        db_path: cli.db_path.clone(),
        base_url: cli.base_url.clone(),
    };
    let outcome = Config::from_env(&flags)
        .map_err(|e| Failure::Config(e.to_string()))
        .and_then(|config| run(config, cli.command));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) | Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Partial) => ExitCode::from(2),
    }
}

fn open(config: &Config) -> Result<Instance, Failure> {
    let base = config
        .base_url
        .clone()
        .unwrap_or_else(|| format!("http://{}", config.bind));
    Instance::open(config.instance_config(&base)).map_err(|e| Failure::Config(format!("cannot open storage: {e}")))
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn run(config: Config, command: Command) -> Result<(), Failure> {
    let sys = Actor::System;
    match command {
        Command::Serve => serve(config),
        Command::Ingest { dir, set } => ingest(&open(&config)?, &dir, ImageSetId(set)),
        Command::Export {
            set,
            version,
            template,
            output,
        } => {
            let inst = open(&config)?;
            let text = inst.export_annotations(sys, ImageSetId(set), version.map(VersionId), &template)?;
            match output {
                Some(path) => std::fs::write(&path, text).map_err(|e| Failure::Failed(format!("{}: {e}", path.display()))),
                None => std::io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|e| Failure::Failed(e.to_string())),
            }
        }
        Command::VersionCreate { set, name, description } => {
            let v = open(&config)?.create_version(sys, ImageSetId(set), &name, description.as_deref())?;
            println!(
                "{}",
                serde_json::json!({"id": v.id, "image_set_id": v.image_set_id, "name": v.name, "annotations": v.snapshot.len()})
            );
            Ok(())
        }
        Command::UserAdd { username, password, admin } => {
            print_json(&open(&config)?.create_user(sys, &username, &password, admin)?);
            Ok(())
        }
        Command::TeamAdd { name, members } => {
            let inst = open(&config)?;
            let parsed = members.iter().map(|m| parse_member(&inst, m)).collect::<Result<Vec<_>, _>>()?;
            let team = inst.create_team(sys, &name)?;
            for (user, rights) in parsed {
                inst.set_membership(sys, team.id, user, rights)?;
            }
            print_json(&team);
            Ok(())
        }
        Command::SetAdd {
            name,
            team,
            is_virtual,
            products,
        } => {
            let inst = open(&config)?;
            let mut set = inst.create_image_set(sys, TeamId(team), &name, "", is_virtual)?;
            for p in products {
                set = inst.attach_product(sys, set.id, ProductId(p))?;
            }
            print_json(&set);
            Ok(())
        }
        Command::Token { username } => {
            let inst = open(&config)?;
            let user = inst
                .user_by_name(&username)
                .ok_or_else(|| Failure::Failed(format!("no user {username:?}")))?;
            println!("{}", inst.issue_token(sys, user.id)?);
            Ok(())
        }
    }
}

fn parse_member(inst: &Instance, spec: &str) -> Result<(UserId, std::collections::BTreeSet<Right>), Failure> {
    let (name, rights) = match spec.split_once(':') {
        Some((n, r)) => (
            n,
            r.split(',')
                .map(|x| x.trim().parse::<Right>().map_err(Failure::Failed))
                .collect::<Result<_, _>>()?,
        ),
        None => (spec, Right::ALL.into_iter().collect()),
    };
    let user = inst
        .user_by_name(name)
        .ok_or_else(|| Failure::Failed(format!("no user {name:?}")))?;
    Ok((user.id, rights))
}

fn ingest(inst: &Instance, dir: &Path, set: ImageSetId) -> Result<(), Failure> {
    inst.image_set(Actor::System, set)?;
    if !dir.is_dir() {
        return Err(Failure::Failed(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    collect_files(dir, &mut files).map_err(|e| Failure::Failed(format!("{}: {e}", dir.display())))?;
    files.sort();
    let mut failed = 0;
    for path in &files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let result = std::fs::read(path)
            .map_err(|e| e.to_string())
            .and_then(|bytes| inst.upload_image(Actor::System, set, &name, &bytes).map_err(|e| e.to_string()));
        match result {
            Ok(img) => print_json(&ImageDto::from(img)),
            Err(e) => {
                failed += 1;
                eprintln!("failed {}: {e}", path.display());
            }
        }
    }
    eprintln!("ingested {} of {} files", files.len() - failed, files.len());
    if failed > 0 {
        Err(Failure::Partial)
    } else {
        Ok(())
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.is_file() {
            out.push(path);
        }
    }
    Ok(())
}

fn serve(config: Config) -> Result<(), Failure> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Failed(e.to_string()))?;
    rt.block_on(async {
        let (listener, inst) = exact_server::bind(&config)
            .await
            .map_err(|e| Failure::Config(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| Failure::Failed(e.to_string()))?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        tracing::info!(%addr, storage = %config.storage_root.display(), "serving");
        axum::serve(listener, exact_server::app(AppState::new(inst)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::Failed(e.to_string()))
    })
}
