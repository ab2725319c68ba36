#![allow(dead_code)]

use std::io::SeekFrom;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use slicefs::cluster::{ClusterConfig, LocalCluster};
use slicefs::{Client, File, FsConfig};

pub fn cluster(region_size: u64, replication: u8, servers: usize) -> (LocalCluster, Arc<Client>) {
    let c = LocalCluster::start(ClusterConfig {
        servers,
        fs: FsConfig { region_size, replication },
        ..Default::default()
    })
    .unwrap();
    let client = c.default_client().unwrap();
    (c, client)
}

pub fn pattern(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen()).collect()
}

/// In-memory model of a set of files plus the handle offsets into them.
#[derive(Default)]
pub struct Model {
    pub files: Vec<Vec<u8>>,
    pub offsets: Vec<u64>,
}

impl Model {
    pub fn write(&mut self, f: usize, off: u64, data: &[u8]) {
        let file = &mut self.files[f];
        let end = off as usize + data.len();
        if file.len() < end {
            file.resize(end, 0);
        }
        file[off as usize..end].copy_from_slice(data);
    }

    pub fn punch(&mut self, f: usize, off: u64, len: u64) {
        self.write(f, off, &vec![0; len as usize]);
    }

    pub fn read(&self, f: usize, off: u64, len: u64) -> &[u8] {
        let file = &self.files[f];
        let s = (off as usize).min(file.len());
        let e = (off as usize + len as usize).min(file.len());
        &file[s..e]
    }
}

const FILES: usize = 3;

/// Runs `ops` random operations against fresh files under `dir` and the
/// model, checking every observable result. Returns a description of the
/// first mismatch.
pub fn oracle_sequence(client: &Arc<Client>, dir: &str, seed: u64, ops: usize) -> Result<(), String> {
    let rs = client.fs_config().region_size;
    let mut rng = StdRng::seed_from_u64(seed);
    let paths: Vec<String> = (0..FILES).map(|i| format!("{dir}/f{i}")).collect();
    client.mkdir_all(dir).map_err(|e| e.to_string())?;
    let mut handles: Vec<File> = paths.iter().map(|p| client.create(p).unwrap()).collect();
    let mut m = Model { files: vec![Vec::new(); FILES], offsets: vec![0; FILES] };
    let max_off = 6 * rs;
    let max_len = (rs + rs / 2).min(12 * 1024);
    let mut data_seed = seed << 20;

    for step in 0..ops {
        let f = rng.gen_range(0..FILES);
        let kind = rng.gen_range(0..100);
        let ctx = |what: &str| format!("seed {seed} step {step} {what}");
        let err = |what: &str, e: slicefs::Error| format!("seed {seed} step {step} {what}: {e}");
        match kind {
            0..=21 => {
                let off = rng.gen_range(0..max_off);
                let len = rng.gen_range(1..=max_len) as usize;
                data_seed += 1;
                let data = pattern(data_seed, len);
                handles[f].seek(SeekFrom::Start(off)).map_err(|e| err("seek", e))?;
                handles[f].write(&data).map_err(|e| err("write", e))?;
                m.write(f, off, &data);
                m.offsets[f] = off + len as u64;
                if handles[f].tell() != m.offsets[f] {
                    return Err(ctx("offset after write"));
                }
            }
            22..=33 => {
                let off = rng.gen_range(0..max_off);
                let len = rng.gen_range(1..=max_len) as usize;
                data_seed += 1;
                let data = pattern(data_seed, len);
                handles[f].pwrite(off, &data).map_err(|e| err("pwrite", e))?;
                m.write(f, off, &data);
            }
            34..=45 => {
                let len = rng.gen_range(1..=max_len.min(rs)) as usize;
                data_seed += 1;
                let data = pattern(data_seed, len);
                let at = handles[f].append(&data).map_err(|e| err("append", e))?;
                let want = m.files[f].len() as u64;
                if at != want {
                    return Err(ctx(&format!("append landed at {at}, model {want}")));
                }
                m.write(f, at, &data);
                m.offsets[f] = at + len as u64;
            }
            46..=53 => {
                let off = rng.gen_range(0..max_off);
                let len = rng.gen_range(1..=max_len);
                handles[f].seek(SeekFrom::Start(off)).map_err(|e| err("seek", e))?;
                handles[f].punch(len).map_err(|e| err("punch", e))?;
                m.punch(f, off, len);
                m.offsets[f] = off;
            }
            54..=71 => {
                let src = f;
                let slen = m.files[src].len() as u64;
                if slen == 0 {
                    continue;
                }
                let off = rng.gen_range(0..slen);
                let len = rng.gen_range(1..=(slen - off).min(2 * max_len));
                let with_data = rng.gen_bool(0.3);
                handles[src].seek(SeekFrom::Start(off)).map_err(|e| err("seek", e))?;
                let y = handles[src].yank(len, with_data).map_err(|e| err("yank", e))?;
                let expect = m.read(src, off, len).to_vec();
                if let Some(d) = &y.data {
                    if *d != expect {
                        return Err(ctx("yanked data differs from model"));
                    }
                }
                if handles[src].tell() != off + len {
                    return Err(ctx("offset after yank"));
                }
                let dst = rng.gen_range(0..FILES);
                let at = rng.gen_range(0..max_off);
                handles[dst].seek(SeekFrom::Start(at)).map_err(|e| err("seek", e))?;
                let n = handles[dst].paste(&y.entries).map_err(|e| err("paste", e))?;
                if n != len {
                    return Err(ctx(&format!("paste returned {n}, yanked {len}")));
                }
                m.write(dst, at, &expect);
                m.offsets[dst] = at + len;
                m.offsets[src] = if dst == src { at + len } else { off + len };
                if handles[dst].tell() != at + len {
                    return Err(ctx("offset after paste"));
                }
            }
            72..=77 => {
                let k = rng.gen_range(0..=3);
                let srcs: Vec<usize> = (0..k).map(|_| rng.gen_range(0..FILES)).collect();
                let dest = rng.gen_range(0..FILES);
                let total: usize = srcs.iter().map(|&i| m.files[i].len()).sum();
                // Repeated concats grow files geometrically; keep them bounded.
                if total as u64 > 4 * max_off {
                    continue;
                }
                let names: Vec<&str> = srcs.iter().map(|&i| paths[i].as_str()).collect();
                client.concat(&names, &paths[dest], true).map_err(|e| err("concat", e))?;
                let joined: Vec<u8> = srcs.iter().flat_map(|&i| m.files[i].clone()).collect();
                m.files[dest] = joined;
            }
            78..=81 => {
                let src = rng.gen_range(0..FILES);
                if src == f {
                    continue;
                }
                client.copy(&paths[src], &paths[f], true).map_err(|e| err("copy", e))?;
                m.files[f] = m.files[src].clone();
            }
            82..=95 => {
                let off = rng.gen_range(0..max_off + rs);
                let len = rng.gen_range(1..=2 * max_len);
                handles[f].seek(SeekFrom::Start(off)).map_err(|e| err("seek", e))?;
                let got = handles[f].read(len).map_err(|e| err("read", e))?;
                if got != m.read(f, off, len) {
                    return Err(ctx(&format!("read [{off}, +{len}) differs")));
                }
                m.offsets[f] = off + got.len() as u64;
            }
            _ => {
                let len = handles[f].len().map_err(|e| err("len", e))?;
                if len != m.files[f].len() as u64 {
                    return Err(ctx(&format!("length {len}, model {}", m.files[f].len())));
                }
            }
        }
    }
    for (i, p) in paths.iter().enumerate() {
        let got = client.read_file(p).map_err(|e| format!("seed {seed} final read: {e}"))?;
        if got != m.files[i] {
            return Err(format!("seed {seed}: final content of {p} differs (len {} vs {})", got.len(), m.files[i].len()));
        }
    }
    Ok(())
}
