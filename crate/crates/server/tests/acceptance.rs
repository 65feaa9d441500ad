//! End-to-end acceptance checks against running servers. Prints one
//! `PASS`/`FAIL` line per criterion and exits non-zero if any failed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use common::*;
use exact_core::screening::{compute_grid, SCREENING_OVERLAP};
use image::{Rgba, RgbaImage};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

type Criterion = (&'static str, fn() -> String);

const CRITERIA: &[Criterion] = &[
    ("screening geometry", screening_geometry),
    ("tile round-trip", tile_round_trip),
    ("pseudonymization", pseudonymization),
    ("version immutability", version_immutability),
    ("visibility modes", visibility_modes),
    ("pagination completeness", pagination_completeness),
    ("layout maps", layout_maps),
    ("correction sync", correction_sync),
    ("federation privacy", federation_privacy),
    ("eiph score", eiph_score),
];

thread_local! {
    static PANIC_AT: std::cell::RefCell<String> = const { std::cell::RefCell::new(String::new()) };
}

fn main() {
    std::panic::set_hook(Box::new(|info| {
        let at = info.location().map(|l| format!("{}:{}", l.file(), l.line())).unwrap_or_default();
        PANIC_AT.with(|p| *p.borrow_mut() = at);
    }));
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS  {name} ({:.1}s) {detail}", t.elapsed().as_secs_f64()),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                let at = PANIC_AT.with(|p| p.borrow().clone());
                println!("FAIL  {name} ({:.1}s) at {at}: {msg}", t.elapsed().as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn within(t: Instant, limit: Duration, what: &str) -> String {
    let took = t.elapsed();
    assert!(took < limit, "{what} took {took:?}, limit {limit:?}");
    format!("[{what} {:.1}s < {}s]", took.as_secs_f64(), limit.as_secs())
}

fn noise(rng: &mut StdRng, w: u32, h: u32) -> RgbaImage {
    RgbaImage::from_fn(w, h, |_, _| Rgba(rng.random()))
}

// ---- screening ----

/// Origins `0, s, 2s, ...` with the last clamped to `image - patch`.
fn origins_oracle(image: u32, patch: u32, stride: u32) -> Vec<u32> {
    let mut v: Vec<u32> = (0..).map(|k| k * stride).take_while(|&o| o + patch < image).collect();
    v.push(image - patch);
    v
}

fn screening_geometry() -> String {
    let w = World::new();
    let img = id(&w.admin.upload_ok(w.set, "wide.png", png_bytes(&gradient(1000, 800))));
    let state = w.admin.post_ok("/screening/", json!({"image": img, "patch_w": 200, "patch_h": 200}));
    assert_eq!((state["cols"].as_u64(), state["rows"].as_u64()), (Some(6), Some(5)));
    let map = id(&state);
    let xs = origins_oracle(1000, 200, 170);
    let ys = origins_oracle(800, 200, 170);
    assert_eq!(xs, [0, 170, 340, 510, 680, 800]);
    assert_eq!(ys, [0, 170, 340, 510, 600]);
    for (c, &x) in xs.iter().enumerate() {
        for (r, &y) in ys.iter().enumerate() {
            let s = w.admin.post_ok(&format!("/screening/{map}/position"), json!({"col": c, "row": r}));
            assert_eq!(s["current_rect"], json!({"x": x, "y": y, "w": 200, "h": 200}));
        }
    }
    assert_eq!(
        w.admin.expect(Method::POST, &format!("/screening/{map}/position"), Some(&json!({"col": 6, "row": 0})), 400)["error"],
        "screening"
    );

    let mut rng = StdRng::seed_from_u64(0x5c7e);
    let t = Instant::now();
    let mut covered = Vec::new();
    for case in 0..500 {
        let (iw, ih) = (rng.random_range(8..=4096u32), rng.random_range(8..=4096u32));
        let pw = rng.random_range(2..=iw.min(1024));
        let ph = rng.random_range(2..=ih.min(1024));
        let g = compute_grid(iw, ih, pw, ph, SCREENING_OVERLAP).unwrap();
        for (origins, image, patch) in [(&g.xs, iw, pw), (&g.ys, ih, ph)] {
            assert_eq!(origins[0], 0, "case {case}");
            assert_eq!(*origins.last().unwrap(), image - patch, "case {case}");
            for pair in origins.windows(2) {
                assert!(pair[0] < pair[1], "case {case}: origins not increasing");
                let overlap = (pair[0] + patch) as f64 - pair[1] as f64;
                assert!(
                    overlap >= 0.15 * patch as f64 - 1e-9,
                    "case {case}: {iw}x{ih} patch {pw}x{ph} overlap {overlap}"
                );
            }
        }
        covered.clear();
        covered.resize((iw * ih) as usize, 0u8);
        for &y in &g.ys {
            for row in y..y + ph {
                let start = (row * iw) as usize;
                for &x in &g.xs {
                    covered[start + x as usize..start + (x + pw) as usize].fill(1);
                }
            }
        }
        assert!(!covered.contains(&0), "case {case}: {iw}x{ih} patch {pw}x{ph} leaves pixels uncovered");
    }
    within(t, Duration::from_secs(30), "500 cases")
}

// ---- tiles ----

fn level_dims_oracle(w: u32, h: u32) -> Vec<(u32, u32)> {
    let mut dims = vec![(w, h)];
    while dims[0] != (1, 1) {
        let (a, b) = dims[0];
        dims.insert(0, (a.div_ceil(2), b.div_ceil(2)));
    }
    dims
}

fn tile_round_trip() -> String {
    let w = World::new();
    let mut rng = StdRng::seed_from_u64(0x711e);
    let t = Instant::now();
    let mut sizes = vec![(2048, 2048), (1, 1), (256, 256), (257, 1)];
    while sizes.len() < 20 {
        sizes.push((rng.random_range(1..=2048), rng.random_range(1..=2048)));
    }
    let mut tiles = 0;
    for (k, &(iw, ih)) in sizes.iter().enumerate() {
        let src = noise(&mut rng, iw, ih);
        let img = id(&w.admin.upload_ok(w.set, &format!("noise_{k}.png"), png_bytes(&src)));
        let p = w.admin.get(&format!("/images/{img}/pyramid"));
        let want = level_dims_oracle(iw, ih);
        let got: Vec<(u32, u32)> = serde_json::from_value(p["level_dims"].clone()).unwrap();
        assert_eq!(got, want, "{iw}x{ih}");
        let top = p["max_level"].as_u64().unwrap() as u32;
        assert_eq!(top as usize, want.len() - 1);
        assert_eq!(top, (iw.max(ih) as f64).log2().ceil() as u32, "{iw}x{ih}");
        let mut out = RgbaImage::new(iw, ih);
        for row in 0..ih.div_ceil(256) {
            for col in 0..iw.div_ceil(256) {
                let (status, bytes) = w.admin.tile(img, 0, top, col, row);
                assert_eq!(status, StatusCode::OK);
                let tile = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                    .unwrap()
                    .to_rgba8();
                image::imageops::replace(&mut out, &tile, (col * 256) as i64, (row * 256) as i64);
                tiles += 1;
            }
        }
        assert!(out == src, "{iw}x{ih}: stitched tiles differ from the source");
        let (status, _) = w.admin.tile(img, 0, top, iw.div_ceil(256), 0);
        assert_eq!(status, StatusCode::NOT_FOUND);
    }
    format!("[{tiles} tiles] {}", within(t, Duration::from_secs(60), "20 images"))
}

// ---- pseudonyms ----

fn fnv1a_oracle(s: &str) -> u32 {
    let mut h: u32 = 2166136261;
    for b in s.bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(16777619);
    }
    h
}

/// `^\d{6}-\d{4}-[0-9a-f]{4}$`
fn matches_public_pattern(s: &str) -> bool {
    let c: Vec<char> = s.chars().collect();
    let digit = |r: std::ops::Range<usize>| c[r].iter().all(|x| x.is_ascii_digit());
    c.len() == 16
        && digit(0..6)
        && c[6] == '-'
        && digit(7..11)
        && c[11] == '-'
        && c[12..].iter().all(|x| matches!(x, '0'..='9' | 'a'..='f'))
}

fn random_name(rng: &mut StdRng, alphabet: &[char]) -> String {
    let len = rng.random_range(1..=40);
    let stem: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
    format!("{stem}.png")
}

fn pseudonymization() -> String {
    let w = World::new();
    let mut rng = StdRng::seed_from_u64(0xf1e);
    let ascii: Vec<char> = ('a'..='z').chain('A'..='Z').chain('0'..='9').chain(" _-.()".chars()).collect();
    let wide: Vec<char> = ascii.iter().copied().chain("äöüßéñ中文字😀".chars()).collect();
    let pixel = png_bytes(&gradient(1, 1));
    let mut seen = BTreeSet::new();
    for k in 0..1000 {
        let name = format!("{k}_{}", random_name(&mut rng, &ascii));
        let v = w.admin.upload_ok(w.set, &name, pixel.clone());
        let public = v["public_name"].as_str().unwrap();
        assert!(matches_public_pattern(public), "{public}");
        let at: DateTime<Utc> = v["created_at"].as_str().unwrap().parse().unwrap();
        let oracle = format!("{}-{:04x}", at.format("%y%m%d-%H%M"), fnv1a_oracle(&name) & 0xffff);
        assert_eq!(public, oracle, "{name}");
        assert!(!v.to_string().contains(&name));
        seen.insert(id(&v));
    }
    assert_eq!(seen.len(), 1000);
    let at = "2024-03-01T09:05:59Z".parse::<DateTime<Utc>>().unwrap().naive_utc();
    for _ in 0..1000 {
        let name = random_name(&mut rng, &wide);
        let a = exact_core::model::pseudonymize_name(&name, at);
        assert_eq!(a, exact_core::model::pseudonymize_name(&name, at));
        assert_eq!(a, format!("240301-0905-{:04x}", fnv1a_oracle(&name) & 0xffff));
        assert!(matches_public_pattern(&a));
    }
    let listed = w.admin.all_pages(&format!("/images/?image_set={}&limit=1000", w.set));
    assert_eq!(listed.len(), 1000);
    assert!(listed.iter().all(|i| i.get("private_name").is_none()));
    "[1000 uploads + 1000 offline names]".into()
}

// ---- versions ----

const FULL_EXPORT: &str = "{id}|{public_name}|{template_name}|{kind}|{vector}|{creator}|{updated_at}";

fn version_immutability() -> String {
    let w = World::new();
    let images: Vec<u64> = (0..2)
        .map(|k| id(&w.admin.upload_ok(w.set, &format!("v{k}.png"), png_bytes(&gradient(500, 400)))))
        .collect();
    let mut rng = StdRng::seed_from_u64(0x7e5);
    let mut live: Vec<u64> = Vec::new();
    let place = |rng: &mut StdRng| (rng.random_range(0..400) as f64, rng.random_range(0..300) as f64);
    for k in 0..20 {
        let (x, y) = place(&mut rng);
        let t = if k % 3 == 0 { w.mitosis } else { w.cell };
        live.push(id(&w.annotate(&w.admin, images[k % 2], t, x, y, json!({"k": k}))));
    }
    let v = id(&w.admin.post("/versions/", json!({"image_set": w.set, "name": "frozen"})));
    let path = |tpl: &str| {
        format!(
            "/export/?image_set={}&version={v}&template={}",
            w.set,
            url::form_urlencoded::byte_serialize(tpl.as_bytes()).collect::<String>()
        )
    };
    let before_default = w.admin.get_text(&format!("/export/?image_set={}&version={v}", w.set));
    let before_full = w.admin.get_text(&path(FULL_EXPORT));
    let before_live = w.admin.get_text(&format!("/export/?image_set={}", w.set));
    assert_eq!(before_default.lines().count(), 20);
    let mut kinds = [0; 3];
    for _ in 0..100 {
        let op = if live.len() < 3 { 2 } else { rng.random_range(0..3) };
        kinds[op] += 1;
        match op {
            0 => {
                let a = live[rng.random_range(0..live.len())];
                let (x, y) = place(&mut rng);
                let body = match rng.random_range(0..3) {
                    0 => json!({"vector": {"x1": x, "y1": y, "x2": x + 10.0, "y2": y + 10.0}}),
                    1 => json!({"meta": {"edited": rng.random::<u32>()}}),
                    _ => json!({"annotation_type": if rng.random_bool(0.5) { w.cell } else { w.mitosis }}),
                };
                w.admin.expect(Method::PATCH, &format!("/annotations/{a}"), Some(&body), 200);
            }
            1 => {
                let a = live.swap_remove(rng.random_range(0..live.len()));
                w.admin.expect(Method::DELETE, &format!("/annotations/{a}"), None, 200);
            }
            _ => {
                let (x, y) = place(&mut rng);
                live.push(id(&w.annotate(&w.admin, images[rng.random_range(0..2)], w.cell, x, y, json!(null))));
            }
        }
    }
    assert_eq!(w.admin.get_text(&format!("/export/?image_set={}&version={v}", w.set)), before_default);
    assert_eq!(w.admin.get_text(&path(FULL_EXPORT)), before_full);
    assert_ne!(w.admin.get_text(&format!("/export/?image_set={}", w.set)), before_live);
    format!("[{} updates, {} deletes, {} creates]", kinds[0], kinds[1], kinds[2])
}

// ---- visibility ----

fn ids_of(list: &[Value], key: &str) -> BTreeSet<u64> {
    list.iter().map(|v| v[key].as_u64().unwrap()).collect()
}

/// Every annotation id a user can learn about through a read endpoint.
fn observed(s: &Session, w: &World, image: u64, version: u64, map: u64, all: &BTreeSet<u64>) -> Vec<(String, BTreeSet<u64>)> {
    let mut out = Vec::new();
    for q in [
        format!("image={image}"),
        format!("image_set={}", w.set),
        "annotation_type=cell".to_string(),
        format!("image={image}&x1=0&y1=0&x2=600&y2=400"),
        String::new(),
    ] {
        out.push((format!("list {q}"), ids_of(&s.all_pages(&format!("/annotations/?{q}")), "id")));
    }
    let direct = all
        .iter()
        .copied()
        .filter(|a| s.call(Method::GET, &format!("/annotations/{a}"), None).0 == StatusCode::OK)
        .collect();
    out.push(("get".into(), direct));
    let export = s.get_text(&format!("/export/?image_set={}&template=%7Bid%7D", w.set));
    out.push(("export".into(), export.lines().map(|l| l.parse().unwrap()).collect()));
    let counts = s.get(&format!("/images/{image}/annotationtypes"));
    let total: u64 = counts.as_array().unwrap().iter().map(|c| c["count"].as_u64().unwrap()).sum();
    out.push((format!("counts total {total}"), BTreeSet::new()));
    out.push(("media".into(), ids_of(&s.all_pages("/media/"), "annotation_id")));
    let snapshot = s.get(&format!("/versions/{version}"))["snapshot"].as_array().unwrap().clone();
    out.push(("version".into(), ids_of(&snapshot, "id")));
    let listed: Vec<Value> = s
        .all_pages(&format!("/versions/?image_set={}", w.set))
        .into_iter()
        .flat_map(|v| v["snapshot"].as_array().unwrap().clone())
        .collect();
    out.push(("versions".into(), ids_of(&listed, "id")));
    let reg = s.get(&format!("/maps/{map}"))["entries"].as_array().unwrap().clone();
    out.push(("map".into(), ids_of(&reg, "source_annotation_id")));
    let verifiable = all
        .iter()
        .copied()
        .filter(|a| {
            s.call(Method::POST, &format!("/annotations/{a}/verify"), Some(&json!({"verdict": "reject"}))).0
                == StatusCode::OK
        })
        .collect();
    out.push(("verify".into(), verifiable));
    out
}

/// Accepting users per annotation, latest verdict per user winning.
fn second_opinion_oracle(verdicts: &BTreeMap<u64, BTreeMap<usize, bool>>, k: usize) -> bool {
    verdicts.values().all(|by_user| by_user.values().filter(|a| **a).count() >= k)
}

fn visibility_modes() -> String {
    let modes = [
        json!({"mode": "cooperative"}),
        json!({"mode": "blind"}),
        json!({"mode": "second_opinion", "required_verifications": 2}),
    ];
    let mut checks = 0;
    for mode in modes {
        let w = World::new();
        let target = w.set("maps", false);
        let users: Vec<Session> = ["ann", "bob", "cyd"].iter().map(|n| w.user(n, ANNOTATOR)).collect();
        let image = id(&w.admin.upload_ok(w.set, "slide.png", png_bytes(&gradient(600, 400))));
        let mut own = Vec::new();
        for (k, u) in users.iter().enumerate() {
            let a = id(&w.annotate(u, image, w.cell, 50.0 + 120.0 * k as f64, 60.0, json!({"grade": k})));
            let form = reqwest::blocking::multipart::Form::new().part(
                "file",
                reqwest::blocking::multipart::Part::bytes(b"note".to_vec()).file_name(format!("note{k}.txt")),
            );
            let r = u
                .http
                .post(u.url(&format!("/annotations/{a}/media")))
                .header("Authorization", format!("Token {}", u.token))
                .multipart(form)
                .send()
                .unwrap();
            assert_eq!(r.status(), StatusCode::CREATED);
            own.push(a);
        }
        let all: BTreeSet<u64> = own.iter().copied().collect();
        let version = id(&w.admin.post("/versions/", json!({"image_set": w.set, "name": "v"})));
        let map = w.admin.post(
            "/maps/classgrid",
            json!({"image_set": w.set, "annotation_type": w.cell, "cell_size": 32, "target_set": target}),
        );
        let map = map["image"]["id"].as_u64().unwrap();
        w.admin.expect(Method::PUT, &format!("/imagesets/{}/mode", w.set), Some(&mode), 200);
        let blind = mode["mode"] == "blind";
        for (k, u) in users.iter().enumerate() {
            let expected: BTreeSet<u64> = if blind { [own[k]].into() } else { all.clone() };
            for (endpoint, seen) in observed(u, &w, image, version, map, &all) {
                if let Some(total) = endpoint.strip_prefix("counts total ") {
                    assert_eq!(total, expected.len().to_string(), "mode {mode}, user {k}, template counts");
                    continue;
                }
                assert_eq!(seen, expected, "mode {mode}, user {k}, endpoint {endpoint}");
                checks += 1;
            }
        }
        if mode["mode"] == "second_opinion" {
            // Verdicts left over from the probe above: every user rejected everything.
            let mut verdicts: BTreeMap<u64, BTreeMap<usize, bool>> =
                own.iter().map(|a| (*a, (0..3).map(|u| (u, false)).collect())).collect();
            let mut rng = StdRng::seed_from_u64(0x2b);
            let mut flipped_at = None;
            for step in 0..60 {
                let (u, a) = (rng.random_range(0..3), own[rng.random_range(0..3)]);
                let accept = rng.random_bool(0.7);
                let verdict = if accept { "accept" } else { "reject" };
                users[u].post_ok(&format!("/annotations/{a}/verify"), json!({"verdict": verdict}));
                verdicts.get_mut(&a).unwrap().insert(u, accept);
                let state = w.admin.get(&format!("/images/{image}/verification"))["verified"].as_bool().unwrap();
                let oracle = second_opinion_oracle(&verdicts, 2);
                assert_eq!(state, oracle, "step {step}");
                if oracle && flipped_at.is_none() {
                    flipped_at = Some(step);
                }
                checks += 1;
            }
            assert!(flipped_at.is_some(), "image never became verified");
        }
    }
    format!("[{checks} checks]")
}

// ---- pagination ----

fn pagination_completeness() -> String {
    let w = World::new();
    let image = id(&w.admin.upload_ok(w.set, "dense.png", png_bytes(&gradient(1000, 1000))));
    let mut rng = StdRng::seed_from_u64(0x9a9e);
    let batch: Vec<Value> = (0..10_000)
        .map(|k| {
            let (x, y) = (rng.random_range(0..990) as f64, rng.random_range(0..990) as f64);
            json!({
                "image": image,
                "annotation_type": if k % 2 == 0 { w.cell } else { w.mitosis },
                "vector": {"x1": x, "y1": y, "x2": x + 10.0, "y2": y + 10.0},
            })
        })
        .collect();
    let created = w.admin.post("/annotations/", Value::Array(batch));
    let mut full: Vec<u64> = created.as_array().unwrap().iter().map(id).collect();
    full.sort();
    assert_eq!(full.len(), 10_000);
    let t = Instant::now();
    for limit in [1usize, 7, 50, 1000] {
        let mut url = w.admin.url(&format!("/annotations/?image={image}&limit={limit}"));
        let mut got = Vec::new();
        let mut pages = 0;
        loop {
            let page: Value = w
                .admin
                .http
                .get(&url)
                .header("Authorization", format!("Token {}", w.admin.token))
                .send()
                .unwrap()
                .json()
                .unwrap();
            assert_eq!(page["count"], 10_000, "limit {limit}, page {pages}");
            let results = page["results"].as_array().unwrap();
            assert!(results.len() <= limit);
            got.extend(results.iter().map(id));
            pages += 1;
            match page["next"].as_str() {
                Some(n) => url = n.to_string(),
                None => break,
            }
        }
        assert_eq!(pages, 10_000usize.div_ceil(limit));
        assert_eq!(got, full, "limit {limit}");
    }
    within(t, Duration::from_secs(60), "4 sweeps")
}

// ---- layout maps ----

fn ceil_sqrt(n: u64) -> u64 {
    (1..).find(|c| c * c >= n).unwrap()
}

fn rect(e: &Value) -> (u64, u64, u64, u64) {
    let r = &e["rect"];
    (
        r["x"].as_u64().unwrap(),
        r["y"].as_u64().unwrap(),
        r["w"].as_u64().unwrap(),
        r["h"].as_u64().unwrap(),
    )
}

fn disjoint(a: (u64, u64, u64, u64), b: (u64, u64, u64, u64)) -> bool {
    a.0 + a.2 <= b.0 || b.0 + b.2 <= a.0 || a.1 + a.3 <= b.1 || b.1 + b.3 <= a.1
}

fn cell_of(e: &Value) -> (u64, u64) {
    (e["col"].as_u64().unwrap(), e["row"].as_u64().unwrap())
}

fn layout_maps() -> String {
    let w = World::new();
    let target = w.set("maps", false);
    let mut rng = StdRng::seed_from_u64(0x1a7);
    for n in [1u64, 10, 100] {
        let set = w.set(&format!("class{n}"), false);
        let image = id(&w.admin.upload_ok(set, "c.png", png_bytes(&gradient(600, 400))));
        let mut ids: Vec<u64> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0..550) as f64, rng.random_range(0..360) as f64);
                id(&w.annotate(&w.admin, image, w.cell, x, y, json!(null)))
            })
            .collect();
        ids.sort();
        let built = w.admin.post(
            "/maps/classgrid",
            json!({"image_set": set, "annotation_type": w.cell, "cell_size": 48, "target_set": target}),
        );
        let reg = &built["registry"];
        let cols = ceil_sqrt(n);
        assert_eq!(reg["cols"].as_u64(), Some(cols), "n={n}");
        assert_eq!(reg["rows"].as_u64(), Some(n.div_ceil(cols)), "n={n}");
        assert_eq!(built["image"]["width"].as_u64(), Some(cols * 48));
        let mut entries = reg["entries"].as_array().unwrap().clone();
        entries.sort_by_key(|e| e["source_annotation_id"].as_u64());
        assert_eq!(entries.len() as u64, n);
        for (k, e) in entries.iter().enumerate() {
            let k = k as u64;
            assert_eq!(e["source_annotation_id"].as_u64(), Some(ids[k as usize]));
            assert_eq!(cell_of(e), (k % cols, k / cols), "n={n}, k={k}");
            assert_eq!(rect(e), ((k % cols) * 48, (k / cols) * 48, 48, 48));
        }
        let cells: BTreeSet<_> = entries.iter().map(cell_of).collect();
        assert_eq!(cells.len() as u64, n);
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                assert!(disjoint(rect(a), rect(b)));
            }
        }
        let map = built["image"]["id"].as_u64().unwrap();
        for e in &entries {
            let (c, r) = cell_of(e);
            let got = w.admin.get(&format!("/maps/{map}"))["entries"]
                .as_array()
                .unwrap()
                .iter()
                .find(|x| cell_of(x) == (c, r))
                .cloned();
            assert_eq!(got.as_ref(), Some(e));
        }
    }

    let set = w.set("scored", false);
    let image = id(&w.admin.upload_ok(set, "s.png", png_bytes(&gradient(600, 400))));
    let scored: Vec<(u64, f64)> = (0..40)
        .map(|_| {
            let (x, y) = (rng.random_range(0..550) as f64, rng.random_range(0..360) as f64);
            let score = (rng.random_range(0..=400) as f64) / 100.0;
            (id(&w.annotate(&w.admin, image, w.cell, x, y, json!({"score": score}))), score)
        })
        .collect();
    let body: Vec<Value> = scored
        .iter()
        .enumerate()
        .map(|(k, (a, s))| {
            if k % 2 == 0 {
                json!({"annotation_id": a, "score": s})
            } else {
                json!({"annotation_id": a})
            }
        })
        .collect();
    let built = w.admin.post(
        "/maps/density",
        json!({"annotations": body, "bin_width": 0.25, "cell_size": 24, "target_set": target}),
    );
    let by_id: BTreeMap<u64, u64> = built["registry"]["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["source_annotation_id"].as_u64().unwrap(), rect(e).0))
        .collect();
    assert_eq!(by_id.len(), 40);
    let mut by_score = scored.clone();
    by_score.sort_by(|a, b| a.1.total_cmp(&b.1));
    for pair in by_score.windows(2) {
        assert!(by_id[&pair[0].0] <= by_id[&pair[1].0], "x not monotone in score: {pair:?}");
    }

    let cluster = |points: &[(u64, f64, f64)], cols: u32, rows: u32| {
        let patches: Vec<Value> = points
            .iter()
            .map(|(a, x, y)| json!({"source_annotation_id": a, "patch_w": 40, "patch_h": 30, "point2d": [x, y]}))
            .collect();
        w.admin.call(
            Method::POST,
            "/maps/cluster",
            Some(&json!({"patches": patches, "canvas_w": cols * 20, "canvas_h": rows * 20, "cell_size": 20, "target_set": target})),
        )
    };
    let pair = [(scored[0].0, 0.3, -1.2), (scored[1].0, 0.3, -1.2)];
    let (status, first) = cluster(&pair, 5, 5);
    assert_eq!(status, StatusCode::CREATED);
    let first: Value = serde_json::from_slice(&first).unwrap();
    let (_, again) = cluster(&pair, 5, 5);
    let again: Value = serde_json::from_slice(&again).unwrap();
    let cells = |v: &Value| -> Vec<(u64, (u64, u64))> {
        let mut c: Vec<_> = v["registry"]["entries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| (e["source_annotation_id"].as_u64().unwrap(), cell_of(e)))
            .collect();
        c.sort();
        c
    };
    assert_eq!(cells(&first), cells(&again), "cluster placement not deterministic");
    let (a, b) = (cells(&first)[0].1, cells(&first)[1].1);
    assert_eq!(a.0.abs_diff(b.0) + a.1.abs_diff(b.1), 1, "coincident points not adjacent: {a:?} {b:?}");

    let mut trials = 0;
    for (cols, rows) in [(4u32, 4u32), (6, 3), (1, 7)] {
        let capacity = (cols * rows) as usize;
        for n in [1, capacity / 2, capacity - 1, capacity] {
            let points: Vec<(u64, f64, f64)> = scored[..n.max(1)]
                .iter()
                .map(|(a, _)| (*a, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                .collect();
            let (status, body) = cluster(&points, cols, rows);
            assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
            let v: Value = serde_json::from_slice(&body).unwrap();
            let mut occupied = vec![vec![false; cols as usize]; rows as usize];
            for (_, (c, r)) in cells(&v) {
                assert!(c < cols as u64 && r < rows as u64);
                assert!(!occupied[r as usize][c as usize], "cell ({c},{r}) used twice");
                occupied[r as usize][c as usize] = true;
            }
            assert_eq!(occupied.iter().flatten().filter(|x| **x).count(), n.max(1));
            trials += 1;
        }
        let over: Vec<(u64, f64, f64)> = scored[..capacity + 1].iter().map(|(a, _)| (*a, 0.0, 0.0)).collect();
        assert_eq!(cluster(&over, cols, rows).0, StatusCode::BAD_REQUEST);
    }
    format!("[class grids 1/10/100, density 40, {trials} cluster layouts]")
}

// ---- corrections ----

fn correction_sync() -> String {
    let w = World::new();
    let target = w.set("maps", false);
    let image = id(&w.admin.upload_ok(w.set, "c.png", png_bytes(&gradient(600, 400))));
    for k in 0..6 {
        w.annotate(&w.admin, image, w.cell, 20.0 + 90.0 * k as f64, 40.0, json!({"k": k}));
    }
    w.annotate(&w.admin, image, w.mitosis, 300.0, 300.0, json!(null));
    let build = |t: u64| {
        w.admin.post(
            "/maps/classgrid",
            json!({"image_set": w.set, "annotation_type": t, "cell_size": 40, "target_set": target}),
        )
    };
    let snapshot = || -> BTreeMap<u64, Value> {
        w.admin
            .all_pages(&format!("/annotations/?image={image}"))
            .into_iter()
            .map(|a| (id(&a), a))
            .collect()
    };
    let map = build(w.cell);
    let map_id = map["image"]["id"].as_u64().unwrap();
    let entries = map["registry"]["entries"].as_array().unwrap().clone();
    let before = snapshot();

    let relabel = &entries[2];
    let src = relabel["source_annotation_id"].as_u64().unwrap();
    let (c, r) = cell_of(relabel);
    let rec = w.admin.post_ok(
        &format!("/maps/{map_id}/corrections"),
        json!({"col": c, "row": r, "action": "relabel", "template_id": w.mitosis}),
    );
    assert_eq!((id(&rec), rec["template_id"].as_u64()), (src, Some(w.mitosis)));
    let after = snapshot();
    for (k, v) in &before {
        if *k == src {
            assert_eq!(after[k]["template_id"].as_u64(), Some(w.mitosis));
            assert_eq!(after[k]["vector"], v["vector"]);
            assert_eq!(after[k]["image_id"].as_u64(), Some(image));
        } else {
            assert_eq!(&after[k], v, "annotation {k} changed by a relabel of {src}");
        }
    }

    let removed = &entries[4];
    let gone = removed["source_annotation_id"].as_u64().unwrap();
    let (c, r) = cell_of(removed);
    w.admin.post_ok(&format!("/maps/{map_id}/corrections"), json!({"col": c, "row": r, "action": "delete"}));
    let after_delete = snapshot();
    assert!(!after_delete.contains_key(&gone));
    assert_eq!(after_delete.len(), after.len() - 1);
    for (k, v) in &after_delete {
        assert_eq!(&after[k], v, "annotation {k} changed by a delete of {gone}");
    }
    assert!(w.admin.get(&format!("/annotations/{gone}"))["deleted"].as_bool().unwrap());

    let rebuilt: BTreeSet<u64> = ids_of(build(w.cell)["registry"]["entries"].as_array().unwrap(), "source_annotation_id");
    let expected: BTreeSet<u64> = entries
        .iter()
        .map(|e| e["source_annotation_id"].as_u64().unwrap())
        .filter(|a| *a != src && *a != gone)
        .collect();
    assert_eq!(rebuilt, expected);
    let mitoses = ids_of(build(w.mitosis)["registry"]["entries"].as_array().unwrap(), "source_annotation_id");
    assert!(mitoses.contains(&src) && mitoses.len() == 2);

    let (status, _) = w.admin.call(
        Method::POST,
        &format!("/maps/{map_id}/corrections"),
        Some(&json!({"col": 2, "row": 2, "action": "delete"})),
    );
    assert_eq!(status, StatusCode::NOT_FOUND);
    "[relabel + delete]".into()
}

// ---- federation ----

const PRIVATE_NAME: &str = "JaneDoe_MRN4471_biopsy.png";

/// GETs every read endpoint reachable from the listings.
fn crawl(s: &Session) {
    for list in ["/users/", "/teams/", "/imagesets/", "/annotationtypes/", "/products/", "/media/", "/versions/"] {
        s.all_pages(list);
    }
    for img in s.all_pages("/images/") {
        let i = id(&img);
        for sub in ["", "/thumbnail", "/pyramid", "/verification", "/annotationtypes", "/eiph?x1=0&y1=0&x2=5000&y2=5000"] {
            s.call(Method::GET, &format!("/images/{i}{sub}"), None);
        }
        s.call(Method::GET, &format!("/images/{i}/download"), None);
        s.call(Method::GET, &format!("/images/{i}/shares"), None);
        for a in s.all_pages(&format!("/annotations/?image={i}")) {
            s.call(Method::GET, &format!("/annotations/{}", id(&a)), None);
        }
    }
    for set in s.all_pages("/imagesets/") {
        let sid = id(&set);
        s.call(Method::GET, &format!("/export/?image_set={sid}&template={}", "%7Bid%7D%20%7Bpublic_name%7D%20%7Bvector%7D"), None);
        s.call(Method::GET, &format!("/export/?image_set={sid}"), None);
    }
}

fn federation_privacy() -> String {
    let a = World::new();
    let b = World::new();
    let slide = gradient(700, 530);
    let shared = a.admin.upload_ok(a.set, PRIVATE_NAME, png_bytes(&slide));
    let img_a = id(&shared);
    let other = id(&a.admin.upload_ok(a.set, "unshared.png", png_bytes(&gradient(64, 64))));
    let mut local_ann = 0;
    for k in 0..3 {
        local_ann = id(&a.annotate(&a.admin, img_a, a.cell, 30.0 + 150.0 * k as f64, 80.0, json!({"grade": k})));
    }
    a.user("peer-b", &["read"]);
    let version = id(&a.admin.post("/versions/", json!({"image_set": a.set, "name": "v"})));

    let reference = a.admin.post(&format!("/images/{img_a}/share"), json!({"peer": b.server.base_url}));
    let scoped = reference["scoped_token"].as_str().unwrap().to_string();
    let vset = b.set("remote", true);
    let img_b = id(&b.admin.post(&format!("/imagesets/{vset}/remote"), reference.clone()));
    assert_eq!(b.admin.get(&format!("/images/{img_b}"))["owner_instance"], json!(a.server.base_url));

    let pyramid = a.admin.get(&format!("/images/{img_a}/pyramid"));
    assert_eq!(b.admin.get(&format!("/images/{img_b}/pyramid"))["level_dims"], pyramid["level_dims"]);
    let mut compared = 0;
    for (level, dims) in pyramid["level_dims"].as_array().unwrap().iter().enumerate() {
        let (lw, lh) = (dims[0].as_u64().unwrap() as u32, dims[1].as_u64().unwrap() as u32);
        for row in 0..lh.div_ceil(256) {
            for col in 0..lw.div_ceil(256) {
                let (s, owner) = a.admin.tile(img_a, 0, level as u32, col, row);
                assert_eq!(s, StatusCode::OK);
                let path = format!("/images/{img_b}/0/{level}/{col}_{row}.png");
                let (s, proxied) = b.admin.call(Method::GET, &format!("{path}?proxy=true"), None);
                assert_eq!(s, StatusCode::OK);
                assert_eq!(proxied, owner, "proxied tile {level}/{col}_{row}");
                let r = b
                    .admin
                    .http
                    .get(b.admin.url(&path))
                    .header("Authorization", format!("Token {}", b.admin.token))
                    .send()
                    .unwrap();
                assert_eq!(r.status(), StatusCode::TEMPORARY_REDIRECT);
                let location = r.headers()["location"].to_str().unwrap().to_string();
                let followed = b.admin.http.get(&location).send().unwrap();
                assert_eq!(followed.status(), StatusCode::OK);
                assert_eq!(followed.bytes().unwrap().to_vec(), owner, "redirected tile {level}/{col}_{row}");
                compared += 1;
            }
        }
    }

    let as_scoped = a.admin.with_token(&scoped);
    let endpoints = non_tile_endpoints(img_a, a.set, local_ann, a.team, version);
    for (m, path) in &endpoints {
        let (s, body) = as_scoped.call(m.clone(), path, Some(&json!({})));
        assert_eq!(s, StatusCode::FORBIDDEN, "{m} {path} with the scoped token");
        assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["error"], "scoped_token");
    }
    let on_b = b.admin.with_token(&scoped);
    for (m, path) in &endpoints {
        assert_eq!(on_b.call(m.clone(), path, Some(&json!({}))).0, StatusCode::UNAUTHORIZED, "{m} {path} on peer");
    }
    assert_eq!(as_scoped.tile(img_a, 0, 0, 0, 0).0, StatusCode::OK);
    assert_eq!(as_scoped.tile(other, 0, 0, 0, 0).0, StatusCode::FORBIDDEN);

    let summary = b.admin.post_ok(
        "/federation/import",
        json!({"peer": a.server.base_url, "username": "peer-b", "password": "pw",
               "remote_image_set": a.set, "image_set": vset}),
    );
    assert_eq!((summary["images"].as_u64(), summary["created"].as_u64()), (Some(1), Some(3)));
    let imported = b.admin.all_pages(&format!("/annotations/?image={img_b}"));
    assert_eq!(imported.len(), 3);

    crawl(&a.admin);
    crawl(&b.admin);
    let peer = login(&a.server.base_url, "peer-b", "pw");
    crawl(&peer);
    b.admin.get(&format!("/images/{img_b}/eiph?x1=0&y1=0&x2=700&y2=530"));

    a.admin.post_ok("/shares/revoke", json!({"token": scoped}));
    assert_eq!(as_scoped.tile(img_a, 0, 0, 0, 0).0, StatusCode::FORBIDDEN);
    let (s, _) = b.admin.call(Method::GET, &format!("/images/{img_b}/0/0/0_0.png?proxy=true"), None);
    assert_eq!(s, StatusCode::FORBIDDEN);

    let stem = PRIVATE_NAME.trim_end_matches(".png");
    let mut scanned = 0;
    for s in [&a.admin, &b.admin, &peer, &as_scoped, &on_b] {
        let bytes = s.transcript.borrow();
        scanned += bytes.len();
        for needle in [PRIVATE_NAME, stem, "MRN4471"] {
            assert!(
                !bytes.windows(needle.len()).any(|w| w == needle.as_bytes()),
                "private name fragment {needle:?} found in a response"
            );
        }
    }
    format!(
        "[{compared} tiles, {} scoped probes per instance, {scanned} response bytes scanned]",
        endpoints.len()
    )
}

// ---- eiph ----

fn eiph_score() -> String {
    let w = World::new();
    let mut rng = StdRng::seed_from_u64(0xe1f);
    let cases: [(&str, Vec<i64>, f64); 3] = [
        ("all 0", vec![0; 100], 0.0),
        ("all 4", vec![4; 100], 400.0),
        ("50x1 + 50x3", [vec![1; 50], vec![3; 50]].concat(), 200.0),
    ];
    for (name, grades, want) in cases {
        let image = id(&w.admin.upload_ok(w.set, "fov.png", png_bytes(&gradient(800, 600))));
        let mut boxes = Vec::new();
        for g in &grades {
            let (x, y) = (rng.random_range(0..760) as f64, rng.random_range(0..570) as f64);
            w.annotate(&w.admin, image, w.cell, x, y, json!({"grade": g}));
            boxes.push((x, y, *g));
        }
        let whole = w.admin.get(&format!("/images/{image}/eiph?x1=0&y1=0&x2=800&y2=600"));
        let mean = 100.0 * grades.iter().sum::<i64>() as f64 / grades.len() as f64;
        assert_eq!(mean, want);
        assert!((whole["score"].as_f64().unwrap() - want).abs() < 1e-9, "{name}: {whole}");
        let (vx1, vy1, vx2, vy2) = (100.0, 100.0, 400.0, 350.0);
        let inside: Vec<i64> = boxes
            .iter()
            .filter(|(x, y, _)| *x <= vx2 && x + 40.0 >= vx1 && *y <= vy2 && y + 30.0 >= vy1)
            .map(|b| b.2)
            .collect();
        let part = w.admin.get(&format!("/images/{image}/eiph?x1={vx1}&y1={vy1}&x2={vx2}&y2={vy2}"));
        let oracle = 100.0 * inside.iter().sum::<i64>() as f64 / inside.len() as f64;
        assert!((part["score"].as_f64().unwrap() - oracle).abs() < 1e-9, "{name} viewport: {part} vs {oracle}");
    }
    "[0, 400, 200]".into()
}
