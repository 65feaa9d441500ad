#![allow(dead_code)]

use exact_core::*;
use image::{Rgba, RgbaImage};
use serde_json::json;
use std::collections::BTreeSet;
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub inst: Instance,
    pub admin: UserId,
    pub team: TeamId,
    pub set: ImageSetId,
    pub product: ProductId,
    pub cell: TemplateId,
    pub mitosis: TemplateId,
    pub image: ImageId,
}

pub fn gradient(w: u32, h: u32) -> RgbaImage {
    RgbaImage::from_fn(w, h, |x, y| Rgba([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8, 255]))
}

pub fn png_bytes(img: &RgbaImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

pub fn all_rights() -> BTreeSet<Right> {
    Right::ALL.into_iter().collect()
}

pub fn rights(r: &[Right]) -> BTreeSet<Right> {
    r.iter().copied().collect()
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let inst = Instance::open(InstanceConfig::new(dir.path())).unwrap();
        Self::populate(dir, inst)
    }

    pub fn populate(dir: TempDir, inst: Instance) -> Self {
        let admin = inst.create_user(Actor::System, "admin", "pw", true).unwrap().id;
        let a = Actor::User(admin);
        let team = inst.create_team(a, "lab").unwrap().id;
        inst.set_membership(a, team, admin, all_rights()).unwrap();
        let set = inst.create_image_set(a, team, "slides", "", false).unwrap().id;
        let cell = inst
            .create_template(a, NewTemplate::new("cell", VectorKind::Box).with_default_size(50, 50))
            .unwrap()
            .id;
        let mitosis = inst.create_template(a, NewTemplate::new("mitosis", VectorKind::Box)).unwrap().id;
        let product = inst.create_product(a, "cells", "", vec![cell, mitosis]).unwrap().id;
        inst.attach_product(a, set, product).unwrap();
        let image = inst
            .upload_image(a, set, "slide_07.png", &png_bytes(&gradient(600, 400)))
            .unwrap()
            .id;
        Fixture { dir, inst, admin, team, set, product, cell, mitosis, image }
    }

    pub fn actor(&self) -> Actor {
        Actor::User(self.admin)
    }

    pub fn user(&self, name: &str, r: &[Right]) -> Actor {
        let u = self.inst.create_user(self.actor(), name, "pw", false).unwrap().id;
        self.inst.set_membership(self.actor(), self.team, u, rights(r)).unwrap();
        Actor::User(u)
    }

    pub fn annotate(&self, actor: Actor, template: TemplateId, x: f64, y: f64, meta: serde_json::Value) -> AnnotationRecord {
        self.inst
            .create_annotation(
                actor,
                exact_core::store::NewAnnotation {
                    image_id: self.image,
                    template_id: template,
                    vector: json!({"x1": x, "y1": y, "x2": x + 40.0, "y2": y + 30.0}),
                    meta,
                },
            )
            .unwrap()
    }
}
