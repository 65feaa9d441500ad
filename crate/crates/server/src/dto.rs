//! Wire shapes that differ from the stored records.

use chrono::{DateTime, Utc};
use exact_core::{ImageId, ImageRecord, ImageSetId};
use serde::{Deserialize, Serialize};

/// Image as exposed over HTTP. The original file name is never included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDto {
    pub id: ImageId,
    pub public_name: String,
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub image_set_id: ImageSetId,
    pub owner_instance: Option<String>,
    pub created_at: DateTime<Utc>,
}

impl From<ImageRecord> for ImageDto {
    fn from(r: ImageRecord) -> Self {
        ImageDto {
            id: r.id,
            public_name: r.public_name,
            width: r.width,
            height: r.height,
            frame_count: r.frame_count,
            image_set_id: r.image_set_id,
            owner_instance: r.owner_instance,
            created_at: r.created_at,
        }
    }
}
