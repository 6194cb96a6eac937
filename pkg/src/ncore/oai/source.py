from __future__ import annotations

from dataclasses import dataclass, replace

from ..handles import Handle


@dataclass(frozen=True)
class HarvestSource:
    id: str
    base_url: str
    metadata_prefix: str
    organization: str
    provider: Handle
    resource_agg: Handle
    metadata_agg: Handle
    set_spec: str | None = None
    schedule: str = "0 2 * * *"
    last_successful_until: str | None = None

    @property
    def identity(self) -> tuple[str, str, str | None]:
        return (self.organization, self.base_url, self.set_spec)

    def with_watermark(self, until: str) -> HarvestSource:
        return replace(self, last_successful_until=until)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "base_url": self.base_url,
            "set_spec": self.set_spec,
            "metadata_prefix": self.metadata_prefix,
            "organization": self.organization,
            "schedule": self.schedule,
            "last_successful_until": self.last_successful_until,
            "provider": str(self.provider),
            "resource_agg": str(self.resource_agg),
            "metadata_agg": str(self.metadata_agg),
        }

    @classmethod
    def from_json(cls, doc: dict) -> HarvestSource:
        return cls(
            id=doc["id"],
            base_url=doc["base_url"],
            metadata_prefix=doc["metadata_prefix"],
            organization=doc["organization"],
            provider=Handle.parse(doc["provider"]),
            resource_agg=Handle.parse(doc["resource_agg"]),
            metadata_agg=Handle.parse(doc["metadata_agg"]),
            set_spec=doc.get("set_spec"),
            schedule=doc.get("schedule") or "0 2 * * *",
            last_successful_until=doc.get("last_successful_until"),
        )
