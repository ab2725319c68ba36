mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use slicefs::bench::{self, SortMode, SortParams};
use slicefs::client::layout::{decode_entry_list, encode_entry_list};
use slicefs::client::{self as fs, Connector};
use slicefs::cluster::{ClusterConfig, LocalCluster};
use slicefs::meta::{MetaStore, MetadataStore};
use slicefs::placement::{Coordinator, Registry, DEFAULT_VNODES};
use slicefs::storage::{StorageConfig, StorageServer};
use slicefs::wire::{self, CoordHandler, MetaHandler, RemoteMeta, RemoteRegistry, StorageHandler, TcpConnector};
use slicefs::{gc, Client, ClientOptions, Error, OpenFlags, Result};

use config::{parse_size, Config};

/// Process exit status for an error is this base plus the error's class code.
const EXIT_BASE: u8 = 64;

#[derive(Parser)]
#[command(name = "slicefs", version, about = "Slice-based distributed filesystem")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Coordinator address.
    #[arg(long, global = true, env = "SLICEFS_COORD")]
    coord: Option<String>,
    /// Metadata server address.
    #[arg(long, global = true, env = "SLICEFS_META")]
    meta: Option<String>,
    /// Run against an embedded cluster stored in this directory instead of daemons.
    #[arg(long, global = true, env = "SLICEFS_LOCAL")]
    local: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Format a new filesystem.
    Init {
        #[arg(long, value_parser = size)]
        region_size: Option<u64>,
        #[arg(long)]
        replication: Option<u8>,
        /// Storage servers (embedded clusters only).
        #[arg(long)]
        servers: Option<usize>,
    },
    /// Run the coordinator.
    Coord {
        #[arg(long, default_value = "127.0.0.1:7400")]
        listen: String,
        /// Seconds without a heartbeat before a server is dropped.
        #[arg(long, default_value_t = 10)]
        timeout: u64,
    },
    /// Run the metadata server.
    Meta {
        #[arg(long, default_value = "127.0.0.1:7401")]
        listen: String,
        #[arg(long)]
        data_dir: PathBuf,
        /// fsync the log on every commit.
        #[arg(long)]
        sync: bool,
    },
    /// Run a storage server.
    Storage {
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        backing_files: Option<usize>,
        /// Address registered with the coordinator; defaults to the bound address.
        #[arg(long)]
        advertise: Option<String>,
        /// Seconds between watermark-driven collections; 0 disables.
        #[arg(long, default_value_t = 30)]
        gc_interval: u64,
    },
    #[command(subcommand)]
    Fs(FsCmd),
    #[command(subcommand)]
    Slice(SliceCmd),
    #[command(subcommand)]
    Gc(GcCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Per-server storage counters and metadata operation counts.
    Counters,
}

#[derive(Subcommand)]
enum FsCmd {
    /// Copy a local file in.
    Put {
        source: PathBuf,
        path: String,
        #[arg(long)]
        overwrite: bool,
    },
    /// Copy a file out.
    Get { path: String, dest: PathBuf },
    Cat { path: String },
    Ls {
        #[arg(default_value = "/")]
        path: String,
        #[arg(short, long)]
        long: bool,
    },
    Ln { existing: String, new: String },
    Rm { path: String },
    Stat { path: String },
    Mkdir {
        path: String,
        #[arg(short, long)]
        parents: bool,
    },
}

#[derive(Subcommand)]
enum SliceCmd {
    /// Write the slice pointers for a byte range to a local file.
    Yank {
        path: String,
        #[arg(long, value_parser = size, default_value = "0")]
        offset: u64,
        #[arg(long, value_parser = size)]
        len: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paste pointers produced by `yank` at an offset.
    Paste {
        path: String,
        #[arg(long, value_parser = size, default_value = "0")]
        offset: u64,
        #[arg(long)]
        from: PathBuf,
    },
    /// Concatenate sources into dest without moving data.
    Concat {
        dest: String,
        #[arg(required = true)]
        sources: Vec<String>,
        #[arg(long)]
        overwrite: bool,
    },
    Copy {
        source: String,
        dest: String,
        #[arg(long)]
        overwrite: bool,
    },
    /// Replace a range with a hole.
    Punch {
        path: String,
        #[arg(long, value_parser = size)]
        offset: u64,
        #[arg(long, value_parser = size)]
        len: u64,
    },
}

#[derive(Subcommand)]
enum GcCmd {
    /// Publish in-use lists and report collectible backing files.
    Scan,
    /// Scan, then rewrite every backing file with collectible bytes.
    Collect,
    /// Compact region lists and spill oversized ones.
    Compact {
        #[arg(long, default_value_t = 2)]
        min_entries: usize,
        #[arg(long, default_value_t = gc::DEFAULT_SPILL_THRESHOLD)]
        spill_threshold: usize,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// External sort; runs on a fresh embedded cluster unless a target is given.
    Sort {
        #[arg(long, value_parser = size, default_value = "64M")]
        size: u64,
        #[arg(long, value_parser = size, default_value = "64K")]
        record: u64,
        #[arg(long, default_value_t = 10)]
        keylen: usize,
        #[arg(long, default_value = "slicing")]
        mode: SortMode,
        #[arg(long, default_value_t = 16)]
        buckets: usize,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Servers in the fresh embedded cluster.
        #[arg(long, default_value_t = 4)]
        servers: usize,
    },
}

fn size(s: &str) -> std::result::Result<u64, String> {
    parse_size(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slicefs: {e}");
            ExitCode::from(EXIT_BASE + e.code() as u8)
        }
    }
}

fn load_config(g: &Global) -> Result<Config> {
    let mut c = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if g.coord.is_some() {
        c.coord = g.coord.clone();
    }
    if g.meta.is_some() {
        c.meta = g.meta.clone();
    }
    Ok(c)
}

fn cluster_config(cfg: &Config) -> ClusterConfig {
    ClusterConfig {
        servers: cfg.servers,
        fs: cfg.fs(),
        storage: storage_config(cfg),
        durable_meta: true,
        ..Default::default()
    }
}

fn storage_config(cfg: &Config) -> StorageConfig {
    StorageConfig { backing_files: cfg.backing_files, gc_high: cfg.gc_high, gc_low: cfg.gc_low, ..Default::default() }
}

/// A connected client; holds the embedded cluster alive when there is one.
struct Session {
    client: Arc<Client>,
    _local: Option<LocalCluster>,
}

fn remote_parts(cfg: &Config) -> Result<(Arc<dyn MetaStore>, Arc<dyn Registry>)> {
    let meta = cfg.meta.clone().ok_or_else(|| Error::invalid("no metadata server: pass --meta or --local"))?;
    let coord = cfg.coord.clone().ok_or_else(|| Error::invalid("no coordinator: pass --coord or --local"))?;
    Ok((Arc::new(RemoteMeta::new(meta)), Arc::new(RemoteRegistry::new(coord))))
}

fn connect(g: &Global, cfg: &Config) -> Result<Session> {
    if let Some(dir) = &g.local {
        let c = LocalCluster::open(dir, cluster_config(cfg))?;
        return Ok(Session { client: c.default_client()?, _local: Some(c) });
    }
    let (meta, registry) = remote_parts(cfg)?;
    let connector: Arc<dyn Connector> = Arc::new(TcpConnector::default());
    Ok(Session { client: Client::new(meta, registry, connector, ClientOptions::default())?, _local: None })
}

fn announce(addr: impl std::fmt::Display) {
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
}

fn park() -> ! {
    loop {
        thread::park();
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = load_config(g)?;
    match cli.cmd {
        Cmd::Init { region_size, replication, servers } => {
            cfg.region_size = region_size.unwrap_or(cfg.region_size);
            cfg.replication = replication.unwrap_or(cfg.replication);
            cfg.servers = servers.unwrap_or(cfg.servers);
            cfg.validate()?;
            match &g.local {
                Some(dir) => {
                    let c = LocalCluster::open(dir, cluster_config(&cfg))?;
                    fs::format(c.meta(), cfg.fs())?;
                }
                None => fs::format(&remote_parts(&cfg)?.0, cfg.fs())?,
            }
            println!("formatted: region_size={} replication={}", cfg.region_size, cfg.replication);
            Ok(())
        }
        Cmd::Coord { listen, timeout } => {
            let coord = Arc::new(Coordinator::new(DEFAULT_VNODES, Some(Duration::from_secs(timeout))));
            let h = wire::serve(listen.as_str(), Arc::new(CoordHandler(coord)))?;
            announce(h.local_addr());
            park()
        }
        Cmd::Meta { listen, data_dir, sync } => {
            std::fs::create_dir_all(&data_dir)?;
            let store = Arc::new(MetadataStore::open(&data_dir.join("meta.log"), sync)?);
            let h = wire::serve(listen.as_str(), Arc::new(MetaHandler(store)))?;
            announce(h.local_addr());
            park()
        }
        Cmd::Storage { listen, data_dir, backing_files, advertise, gc_interval } => {
            cfg.backing_files = backing_files.unwrap_or(cfg.backing_files);
            cfg.validate()?;
            run_storage(&cfg, &listen, &data_dir, advertise, gc_interval)
        }
        Cmd::Fs(c) => run_fs(&connect(g, &cfg)?.client, c),
        Cmd::Slice(c) => run_slice(&connect(g, &cfg)?.client, c),
        Cmd::Gc(c) => run_gc(&connect(g, &cfg)?.client, c),
        Cmd::Bench(BenchCmd::Sort { size, record, keylen, mode, buckets, workers, seed, servers }) => {
            let p = SortParams {
                size,
                record,
                key_len: keylen,
                mode,
                buckets,
                workers,
                seed,
                ..Default::default()
            };
            let report = if g.local.is_some() || cfg.meta.is_some() {
                bench::sort(&connect(g, &cfg)?.client, &p)?
            } else {
                let c = LocalCluster::start(ClusterConfig {
                    servers,
                    fs: fs::FsConfig { region_size: cfg.region_size, replication: 1 },
                    ..Default::default()
                })?;
                bench::sort(&c.default_client()?, &p)?
            };
            println!("{report}");
            Ok(())
        }
        Cmd::Counters => {
            let s = connect(g, &cfg)?;
            let client = &s.client;
            for srv in &client.refresh_membership()?.servers {
                let c = client.service(srv.id)?.counters()?;
                println!(
                    "server {} {}: bytes_written={} bytes_read={} slices_created={} slices_read={} gc_rewritten={} gc_reclaimed={}",
                    srv.id,
                    srv.address,
                    c.bytes_written,
                    c.bytes_read,
                    c.slices_created,
                    c.slices_read,
                    c.gc_bytes_rewritten,
                    c.gc_bytes_reclaimed
                );
            }
            let m = client.meta().counters();
            println!(
                "meta: gets={} puts={} appends={} commits={} conflicts={} scans={}",
                m.gets, m.puts, m.appends, m.commits, m.conflicts, m.scans
            );
            Ok(())
        }
    }
}

fn run_storage(cfg: &Config, listen: &str, dir: &Path, advertise: Option<String>, gc_interval: u64) -> Result<()> {
    let coord_addr = cfg.coord.clone().ok_or_else(|| Error::invalid("storage needs --coord"))?;
    let server = Arc::new(StorageServer::open(dir, storage_config(cfg))?);
    let h = wire::serve(listen, Arc::new(StorageHandler(server.clone())))?;
    let address = advertise.unwrap_or_else(|| h.local_addr().to_string());
    let registry = RemoteRegistry::new(coord_addr);
    let register = |registry: &RemoteRegistry| -> Result<()> {
        let (id, epoch) = registry.register_server(&address, server.id())?;
        if server.id() != Some(id) {
            server.set_id(id)?;
        }
        log::info!("registered as server {id} at epoch {epoch}");
        Ok(())
    };
    register(&registry)?;
    announce(h.local_addr());

    if gc_interval > 0 {
        let server = server.clone();
        thread::spawn(move || loop {
            thread::sleep(Duration::from_secs(gc_interval));
            match server.run_gc(false) {
                Ok(done) => {
                    for (name, n) in done {
                        log::info!("collected {n} bytes from {name}");
                    }
                }
                Err(e) => log::warn!("collection failed: {e}"),
            }
        });
    }

    loop {
        thread::sleep(Duration::from_secs(1));
        let id = server.id().expect("registered");
        match registry.heartbeat(id) {
            Ok(_) => {}
            Err(Error::UnknownServer) => {
                log::warn!("coordinator forgot server {id}, re-registering");
                if let Err(e) = register(&registry) {
                    log::warn!("re-registration failed: {e}");
                }
            }
            Err(e) => log::warn!("heartbeat failed: {e}"),
        }
    }
}

fn run_fs(client: &Arc<Client>, cmd: FsCmd) -> Result<()> {
    match cmd {
        FsCmd::Put { source, path, overwrite } => client.write_file(&path, &std::fs::read(source)?, overwrite),
        FsCmd::Get { path, dest } => Ok(std::fs::write(dest, client.read_file(&path)?)?),
        FsCmd::Cat { path } => {
            let mut out = std::io::stdout().lock();
            out.write_all(&client.read_file(&path)?)?;
            Ok(out.flush()?)
        }
        FsCmd::Ls { path, long } => {
            let mut names = client.readdir(&path)?;
            names.sort();
            for name in names {
                if long {
                    let full = if path.ends_with('/') { format!("{path}{name}") } else { format!("{path}/{name}") };
                    let st = client.stat(&full)?;
                    let kind = if st.is_dir { 'd' } else { '-' };
                    println!("{kind}{:o} {:>3} {:>12} {name}", st.mode & 0o7777, st.link_count, st.length);
                } else {
                    println!("{name}");
                }
            }
            Ok(())
        }
        FsCmd::Ln { existing, new } => client.link(&existing, &new),
        FsCmd::Rm { path } => client.unlink(&path),
        FsCmd::Stat { path } => {
            let st = client.stat(&path)?;
            println!("inode: {}", st.inode);
            println!("type: {}", if st.is_dir { "directory" } else { "file" });
            println!("length: {}", st.length);
            println!("links: {}", st.link_count);
            println!("mode: {:o}", st.mode & 0o7777);
            println!("owner: {}:{}", st.uid, st.gid);
            println!("mtime_ms: {}", st.mtime);
            println!("region_size: {}", st.region_size);
            println!("replication: {}", st.replication);
            Ok(())
        }
        FsCmd::Mkdir { path, parents } => {
            if parents {
                client.mkdir_all(&path)
            } else {
                client.mkdir(&path)
            }
        }
    }
}

fn run_slice(client: &Arc<Client>, cmd: SliceCmd) -> Result<()> {
    match cmd {
        SliceCmd::Yank { path, offset, len, out } => {
            let mut f = client.open(&path, OpenFlags::read_only())?;
            let len = match len {
                Some(l) => l,
                None => f.len()?.saturating_sub(offset),
            };
            f.seek(std::io::SeekFrom::Start(offset))?;
            let y = f.yank(len, false)?;
            std::fs::write(out, encode_entry_list(&y.entries))?;
            println!("yanked {} entries covering {len} bytes", y.entries.len());
            Ok(())
        }
        SliceCmd::Paste { path, offset, from } => {
            let entries = decode_entry_list(&std::fs::read(from)?)?;
            let mut f = client.open(&path, OpenFlags::create())?;
            f.seek(std::io::SeekFrom::Start(offset))?;
            f.paste(&entries)?;
            Ok(())
        }
        SliceCmd::Concat { dest, sources, overwrite } => {
            let srcs: Vec<&str> = sources.iter().map(String::as_str).collect();
            client.concat(&srcs, &dest, overwrite)
        }
        SliceCmd::Copy { source, dest, overwrite } => client.copy(&source, &dest, overwrite),
        SliceCmd::Punch { path, offset, len } => {
            let mut f = client.open(&path, OpenFlags::read_write())?;
            f.seek(std::io::SeekFrom::Start(offset))?;
            f.punch(len)
        }
    }
}

fn run_gc(client: &Arc<Client>, cmd: GcCmd) -> Result<()> {
    match cmd {
        GcCmd::Scan => {
            let r = gc::global_scan(client)?;
            println!("scan {}", r.scan_id);
            for (id, rep) in &r.reports {
                let referenced = r.referenced.get(id).copied().unwrap_or(0);
                println!("server {id}: referenced={referenced} candidates={}", rep.candidates.len());
                for (name, bytes) in &rep.candidates {
                    println!("  {name}: {bytes} collectible");
                }
            }
            Ok(())
        }
        GcCmd::Collect => {
            let r = gc::global_scan(client)?;
            let done = gc::collect(client, &r)?;
            let total: u64 = done.iter().map(|d| d.2).sum();
            for (id, name, n) in &done {
                println!("server {id} {name}: reclaimed {n}");
            }
            println!("scan {}: reclaimed {total} bytes from {} backing files", r.scan_id, done.len());
            Ok(())
        }
        GcCmd::Compact { min_entries, spill_threshold } => {
            let done = gc::sweep(client, min_entries, spill_threshold)?;
            let before: usize = done.iter().map(|d| d.2.entries_before).sum();
            let after: usize = done.iter().map(|d| d.2.entries_after).sum();
            println!("compacted {} regions: {before} entries -> {after}", done.len());
            Ok(())
        }
    }
}
