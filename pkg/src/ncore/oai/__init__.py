"""OAI-PMH data provider and harvester."""
